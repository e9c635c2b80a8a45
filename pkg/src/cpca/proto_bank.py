"""Class prototypes over causal features: init, similarity, aggregation, EMA."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import torch

from .errors import ContractError, TrainingError

IGNORE = 255


@dataclass
class PrototypeBank:
    prototypes: torch.Tensor  # float64 [K, d]; never a leaf that requires grad
    valid: torch.Tensor  # bool [K]
    t: int = 0
    T: int = 1
    m0: float = 0.9
    alpha: float = 0.9

    def __post_init__(self):
        if self.prototypes.requires_grad:
            raise TrainingError("prototype bank must not require gradients")
        if not (0 < self.m0 <= 1 and 0 < self.alpha <= 1):
            raise ContractError("m0 and alpha must lie in (0, 1]")

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def complete(self):
        return bool(self.valid.all())

    def clone(self):
        return replace(self, prototypes=self.prototypes.clone(), valid=self.valid.clone())


def _flatten(features, labels):
    """[B, d, h, w] + [B, h, w] -> ([N, d], [N])."""
    if features.ndim != 4 or labels.shape != (features.shape[0],) + tuple(features.shape[2:]):
        raise ContractError(
            f"labels {tuple(labels.shape)} do not match features {tuple(features.shape)}")
    d = features.shape[1]
    return features.permute(0, 2, 3, 1).reshape(-1, d), labels.reshape(-1)


def init_prototypes(stream: Iterable, num_classes: int, T: int = 1,
                    m0: float = 0.9, alpha: float = 0.9) -> PrototypeBank:
    """Per-class mean of causal features over a (features, labels_ds) stream.

    Labels must already be at feature resolution. Classes never seen are
    flagged invalid and their prototype stays zero.
    """
    sums = counts = None
    for feats, labels in stream:
        f, y = _flatten(feats.detach().to(torch.float64), torch.as_tensor(labels).long())
        if sums is None:
            sums = torch.zeros(num_classes, f.shape[1], dtype=torch.float64)
            counts = torch.zeros(num_classes, dtype=torch.float64)
        keep = y != IGNORE
        f, y = f[keep], y[keep]
        if (y >= num_classes).any():
            raise ContractError("label exceeds num_classes")
        sums.index_add_(0, y, f)
        counts += torch.bincount(y, minlength=num_classes).to(torch.float64)
    if sums is None or counts.sum() == 0:
        raise ContractError("prototype init needs at least one labelled pixel")
    valid = counts > 0
    protos = torch.zeros_like(sums)
    protos[valid] = sums[valid] / counts[valid, None]
    return PrototypeBank(protos, valid, 0, T, m0, alpha)


def similarity(features, bank: PrototypeBank, tau: float, kind: str = "dot"):
    """Per-pixel softmax over prototype dot products, [B, K, h, w]."""
    return log_similarity(features, bank, tau, kind).exp()


def log_similarity(features, bank: PrototypeBank, tau: float, kind: str = "dot"):
    """Log of :func:`similarity`, computed without underflow.

    ``kind="cosine"`` L2-normalises features and prototypes before the dot
    product, which bounds the logits by 1/tau.
    """
    if tau <= 0:
        raise ContractError("temperature must be > 0")
    if kind not in ("dot", "cosine"):
        raise ContractError(f"unknown similarity {kind!r}")
    if not bank.complete:
        missing = [k for k in range(bank.num_classes) if not bank.valid[k]]
        raise ContractError(f"prototype bank incomplete: classes {missing} have no prototype")
    p = bank.prototypes.to(features.dtype)
    if kind == "cosine":
        p = torch.nn.functional.normalize(p, dim=1, eps=1e-12)
        features = torch.nn.functional.normalize(features, dim=1, eps=1e-12)
    logits = torch.einsum("kd,bdhw->bkhw", p, features) / tau
    return torch.log_softmax(logits, dim=1)


def aggregate_class(features, sims, labels, num_classes: int, weighting: str = "inverse"):
    """Similarity-weighted per-class feature average.

    ``features`` [N, d] (or [B, d, h, w]), ``sims`` the per-pixel similarity to
    the pixel's own class ([N] or [B, h, w]), ``labels`` matching. With the
    default "inverse" weighting a pixel counts with (1 - s); "direct" uses s.
    Returns (C' [K, d], valid [K]).
    """
    if features.ndim == 4:
        features, labels_flat = _flatten(features, labels)
        sims = sims.reshape(-1)
        labels = labels_flat
    features = features.detach().to(torch.float64)
    sims = sims.detach().to(torch.float64).reshape(-1)
    labels = torch.as_tensor(labels).long().reshape(-1)
    if weighting == "inverse":
        w = 1.0 - sims
    elif weighting == "direct":
        w = sims.clone()
    else:
        raise ContractError(f"unknown aggregation weighting {weighting!r}")
    d = features.shape[1]
    out = torch.zeros(num_classes, d, dtype=torch.float64)
    valid = torch.zeros(num_classes, dtype=torch.bool)
    for k in range(num_classes):
        mask = labels == k
        n = int(mask.sum())
        if n == 0:
            continue
        fk, wk = features[mask], w[mask]
        total = wk.sum()
        if total > 0:
            out[k] = (wk / total) @ fk
        else:
            out[k] = fk.mean(0)
        valid[k] = True
    return out, valid


def pick_own_class(sims, labels):
    """Gather S^{y} per pixel from [B, K, h, w] sims; IGNORE pixels get 0."""
    y = torch.as_tensor(labels).long()
    safe = torch.where(y == IGNORE, torch.zeros_like(y), y)
    s = sims.gather(1, safe.unsqueeze(1)).squeeze(1)
    return torch.where(y == IGNORE, torch.zeros_like(s), s)


def momentum(t, T, m0=0.9, alpha=0.9) -> float:
    """Polynomially annealed EMA momentum, from m0 at t=0 down to m0/100 at t=T."""
    if T <= 0 or not 0 <= t <= T:
        raise ContractError(f"need 0 <= t <= T and T > 0, got t={t}, T={T}")
    return (1.0 - t / T) ** alpha * (m0 - m0 / 100.0) + m0 / 100.0


def update_prototypes(bank: PrototypeBank, class_feats, valid, m: float) -> PrototypeBank:
    """EMA step p' = (1 - m) p + m C' on classes with a valid C'."""
    if not 0 <= m <= 1:
        raise ContractError("momentum must lie in [0, 1]")
    valid = torch.as_tensor(valid, dtype=torch.bool)
    new = bank.prototypes.clone()
    cf = torch.as_tensor(class_feats, dtype=torch.float64)
    new[valid] = (1.0 - m) * bank.prototypes[valid] + m * cf[valid]
    return replace(bank, prototypes=new, t=min(bank.t + 1, bank.T))
