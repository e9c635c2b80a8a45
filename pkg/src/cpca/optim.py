"""SGD with classic momentum and coupled weight decay, plus the poly LR schedule."""
from __future__ import annotations

import torch

from .errors import ContractError, TrainingError


def lr_schedule(t, T, lr0, power=0.9, kind="poly") -> float:
    if kind == "constant":
        return lr0
    if kind != "poly":
        raise ContractError(f"unknown lr schedule {kind!r}")
    if T <= 0 or not 0 <= t <= T:
        raise ContractError(f"need 0 <= t <= T and T > 0, got t={t}, T={T}")
    return lr0 * (1.0 - t / T) ** power


class SGD:
    """v <- mu * v + (g + wd * p);  p <- p - lr * v.

    Buffers are keyed by parameter name so they can be checkpointed.
    """

    def __init__(self, named_params, momentum=0.9, weight_decay=5e-4):
        self.params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {n: torch.zeros_like(p, memory_format=torch.contiguous_format)
                        for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr):
        grads = {}
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                bad = int((~torch.isfinite(g)).sum())
                raise TrainingError(f"non-finite gradient in {n}: {bad} of {g.numel()} entries")
            grads[n] = g
        for n, p in self.params.items():
            sgd_step(p, grads[n], self.buffers[n], lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {n: b.clone() for n, b in self.buffers.items()}

    def load_state_dict(self, state):
        missing = set(self.buffers) - set(state)
        if missing:
            raise ContractError(f"optimizer state lacks buffers for {sorted(missing)}")
        for n in self.buffers:
            self.buffers[n].copy_(state[n])


@torch.no_grad()
def sgd_step(p, g, v, lr, momentum, weight_decay):
    """In-place update of parameter ``p`` and momentum buffer ``v``."""
    if p.shape != g.shape or p.shape != v.shape:
        raise ContractError("parameter, gradient and buffer shapes differ")
    v.mul_(momentum).add_(g + weight_decay * p)
    p.sub_(lr * v)
    return p
