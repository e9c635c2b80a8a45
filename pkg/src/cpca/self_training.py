"""Class-balanced confidence-ranked pseudo-labels for the target domain."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError

IGNORE = 255


@dataclass
class PseudoLabelSet:
    labels: np.ndarray  # uint8 [N, H, W]
    counts: np.ndarray  # l_k, pixels predicted as k
    thresholds: np.ndarray  # sigma_k, +inf for empty classes
    eta: float

    @property
    def retained(self):
        return int((self.labels != IGNORE).sum())

    def retained_per_class(self):
        K = len(self.counts)
        flat = self.labels[self.labels != IGNORE]
        return np.bincount(flat, minlength=K)[:K]


def confidence_maps(probs):
    """Softmax probabilities [N, K, H, W] -> (pred [N, H, W], conf [N, H, W])."""
    probs = torch.as_tensor(probs)
    conf, pred = probs.max(dim=1)
    return pred.numpy().astype(np.int64), conf.numpy().astype(np.float64)


def collect_confidences(pred, conf, num_classes: int):
    """Group pixel confidences by predicted class, each list sorted descending.

    Returns (deltas, counts) with counts[k] == len(deltas[k]).
    """
    pred = np.asarray(pred).ravel()
    conf = np.asarray(conf, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ContractError("no target pixels to collect confidences from")
    if pred.shape != conf.shape:
        raise ContractError("prediction and confidence maps differ in shape")
    deltas = [-np.sort(-conf[pred == k]) for k in range(num_classes)]
    counts = np.array([len(d) for d in deltas], dtype=np.int64)
    return deltas, counts


def retention_rank(count: int, eta: float) -> int:
    # round first so e.g. 30 * 0.1 = 3.0000000000000004 does not ceil to 4
    return math.ceil(round(count * eta, 9))


def compute_thresholds(deltas, counts, eta: float) -> np.ndarray:
    """sigma_k = confidence at 1-based rank ceil(l_k * eta) of the descending list."""
    if not 0 < eta <= 1:
        raise ContractError("eta must lie in (0, 1]")
    sigma = np.full(len(deltas), np.inf)
    for k, (d, l) in enumerate(zip(deltas, counts)):
        if l > 0:
            sigma[k] = d[retention_rank(int(l), eta) - 1]
    return sigma


def emit_pseudolabels(pred, conf, thresholds, counts=None, eta=None) -> PseudoLabelSet:
    """Keep a pixel's predicted class when its confidence reaches that class's threshold."""
    pred = np.asarray(pred)
    conf = np.asarray(conf, dtype=np.float64)
    thr = np.asarray(thresholds, dtype=np.float64)
    keep = conf >= thr[pred]
    labels = np.where(keep, pred, IGNORE).astype(np.uint8)
    if counts is None:
        counts = np.bincount(pred.ravel(), minlength=len(thr))
    return PseudoLabelSet(labels, np.asarray(counts), thr, eta)


def pseudolabels_from_probs(probs, eta: float) -> PseudoLabelSet:
    pred, conf = confidence_maps(probs)
    K = torch.as_tensor(probs).shape[1]
    deltas, counts = collect_confidences(pred, conf, K)
    sigma = compute_thresholds(deltas, counts, eta)
    return emit_pseudolabels(pred, conf, sigma, counts, eta)
