"""Counterfactual features by swapping bias maps across a mini-batch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError


@dataclass(frozen=True)
class BatchPermutation:
    perm: tuple
    seed: object = None

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ContractError(f"{self.perm} is not a permutation")

    def __len__(self):
        return len(self.perm)

    @property
    def is_identity(self):
        return all(i == p for i, p in enumerate(self.perm))

    def inverse(self) -> "BatchPermutation":
        inv = [0] * len(self.perm)
        for i, p in enumerate(self.perm):
            inv[p] = i
        return BatchPermutation(tuple(inv), self.seed)

    def apply(self, x):
        """x'[i] = x[perm[i]] along the leading axis."""
        if isinstance(x, torch.Tensor):
            return x[torch.as_tensor(self.perm, dtype=torch.long, device=x.device)]
        return np.asarray(x)[list(self.perm)]


def identity(B: int) -> BatchPermutation:
    return BatchPermutation(tuple(range(B)))


def sample_permutation(B: int, seed, derangement: bool = False) -> BatchPermutation:
    """Uniform random permutation of range(B); fixed points allowed unless ``derangement``."""
    if B < 1:
        raise ContractError("batch size must be >= 1")
    rng = np.random.default_rng(seed)
    if B == 1:
        return BatchPermutation((0,), seed)
    while True:
        perm = rng.permutation(B)
        if not derangement or not (perm == np.arange(B)).any():
            return BatchPermutation(tuple(int(p) for p in perm), seed)


def make_counterfactual(C, Bf, labels, perm: BatchPermutation):
    """Return (F_biased, F_unbiased, y_swapped).

    F_biased = [C; Bf], F_unbiased = [C; Bf[perm]], y_swapped = labels[perm].
    """
    if C.shape != Bf.shape:
        raise ContractError(f"causal {tuple(C.shape)} and bias {tuple(Bf.shape)} shapes differ")
    if len(perm) != C.shape[0] or labels.shape[0] != C.shape[0]:
        raise ContractError("permutation, labels and features disagree on batch size")
    f_biased = torch.cat([C, Bf], dim=1)
    f_unbiased = torch.cat([C, perm.apply(Bf)], dim=1)
    return f_biased, f_unbiased, perm.apply(labels)
