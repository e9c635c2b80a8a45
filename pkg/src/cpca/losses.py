"""Scalar training objectives. All pixel losses are means over non-IGNORE pixels."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ContractError

IGNORE = 255


def _check_labels(logits, labels):
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ContractError(
            f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    K = logits.shape[1]
    bad = (labels != IGNORE) & ((labels >= K) | (labels < 0))
    if bool(bad.any()):
        raise ContractError(f"label {int(labels[bad][0])} outside 0..{K - 1} and not IGNORE")


def ce_pixels(logits, labels, return_count=False):
    """Mean pixel cross-entropy of logits [B, K, H, W] against labels [B, H, W]."""
    labels = torch.as_tensor(labels).long()
    _check_labels(logits, labels)
    mask = labels != IGNORE
    n = int(mask.sum())
    if n == 0:
        loss = logits.sum() * 0.0
    else:
        logp = F.log_softmax(logits, dim=1)
        safe = torch.where(mask, labels, torch.zeros_like(labels))
        nll = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
        loss = nll[mask].sum() / n
    return (loss, n) if return_count else loss


def sce(logits, labels, alpha=1.0, beta=1.0, log_floor=-4.0, return_count=False):
    """Symmetric cross entropy: alpha * CE + beta * reverse CE.

    The reverse term is -sum_j p_j log q_j with q the one-hot label and log 0
    clamped to ``log_floor``, which reduces to -log_floor * (1 - p_y).
    """
    if alpha < 0 or beta < 0:
        raise ContractError("SCE weights must be >= 0")
    if log_floor >= 0:
        raise ContractError("log_floor must be negative")
    labels = torch.as_tensor(labels).long()
    _check_labels(logits, labels)
    mask = labels != IGNORE
    n = int(mask.sum())
    if n == 0:
        loss = logits.sum() * 0.0
        return (loss, 0) if return_count else loss
    logp = F.log_softmax(logits, dim=1)
    safe = torch.where(mask, labels, torch.zeros_like(labels)).unsqueeze(1)
    ce = -logp.gather(1, safe).squeeze(1)
    per_pixel = alpha * ce
    if beta != 0:
        p_y = logp.exp().gather(1, safe).squeeze(1)
        per_pixel = per_pixel + beta * (-log_floor) * (1.0 - p_y)
    loss = per_pixel[mask].sum() / n
    return (loss, n) if return_count else loss


def _sim_nll(sims, labels, log_space=False):
    labels = torch.as_tensor(labels).long()
    _check_labels(sims, labels)
    mask = labels != IGNORE
    n = int(mask.sum())
    if n == 0:
        return sims.sum() * 0.0, 0
    safe = torch.where(mask, labels, torch.zeros_like(labels))
    p = sims.gather(1, safe.unsqueeze(1)).squeeze(1)[mask]
    return -(p if log_space else torch.log(p)).sum() / n, n


def contrast_loss(sim_s, y_s, sim_t=None, yhat_t=None, log_space=False):
    """Prototype contrast: NLL of the labelled class under the similarity maps.

    With ``log_space`` the maps hold log-probabilities. Returns (l_s, l_t, l_cc);
    an absent side contributes 0.
    """
    if sim_s is not None:
        l_s, _ = _sim_nll(sim_s, y_s, log_space)
    else:
        l_s = torch.zeros(())
    if sim_t is not None:
        l_t, _ = _sim_nll(sim_t, yhat_t, log_space)
    else:
        l_t = torch.zeros((), dtype=l_s.dtype)
    return l_s, l_t, l_s + l_t


def causal_cls_loss(logits_biased, logits_unbiased, y_s):
    l_c1 = ce_pixels(logits_biased, y_s)
    l_c2 = ce_pixels(logits_unbiased, y_s)
    return l_c1, l_c2, l_c1 + l_c2


def bias_cls_loss(logits_b_biased, y_s, logits_b_unbiased, y_swapped,
                  alpha=1.0, beta=1.0, log_floor=-4.0):
    l_b1 = sce(logits_b_biased, y_s, alpha, beta, log_floor)
    l_b2 = sce(logits_b_unbiased, y_swapped, alpha, beta, log_floor)
    return l_b1, l_b2, l_b1 + l_b2


def in_warmup(t: int, warmup: int) -> bool:
    """Counterfactual terms switch on at t == warmup (inclusive)."""
    if t < 0:
        raise ContractError("iteration must be >= 0")
    return t < warmup


def total_loss(l_cc, l_c1, l_c2, l_b1, l_b2, t: int, warmup: int):
    if in_warmup(t, warmup):
        return l_cc + l_c1 + l_b1
    return l_cc + (l_c1 + l_c2) + (l_b1 + l_b2)


@dataclass
class LossBundle:
    l_seg: float = 0.0
    l_s: float = 0.0
    l_t: float = 0.0
    l_cc: float = 0.0
    l_c1: float = 0.0
    l_c2: float = 0.0
    l_b1: float = 0.0
    l_b2: float = 0.0
    l_c: float = 0.0
    l_b: float = 0.0
    total: float = 0.0
    n_source: int = 0
    n_target: int = 0

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def values(self):
        return [getattr(self, n) for n in self.field_names()]
