"""AdamW with decoupled weight decay, global-norm clipping and the WSD schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def wsd_schedule(step: int, total_steps: int, max_lr: float, warmup_frac: float = 0.1,
                 decay_frac: float = 0.1, min_ratio: float = 0.02) -> float:
    """Linear warmup 0 -> max, flat at max, linear decay max -> min_ratio * max.

    ``step`` runs from 0 to ``total_steps`` inclusive.
    """
    if not (0 <= warmup_frac <= 1 and 0 <= decay_frac <= 1 and warmup_frac + decay_frac <= 1):
        raise ValueError("warmup_frac and decay_frac must lie in [0,1] and sum to <= 1")
    if total_steps <= 0:
        return max_lr
    s = min(max(step, 0), total_steps)
    w = warmup_frac * total_steps
    d0 = (1 - decay_frac) * total_steps
    if w > 0 and s < w:
        return max_lr * s / w
    if s <= d0 or decay_frac == 0:
        return max_lr
    frac = (s - d0) / (total_steps - d0)
    return max_lr * (1 - frac * (1 - min_ratio))


@dataclass
class AdamWConfig:
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``;
    returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        c = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= np.asarray(c, dtype=g.dtype)
    return total


class AdamW:
    """Decoupled weight decay applied only to matrices (``ndim >= 2``)."""

    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig | None = None):
        self.params = params
        self.cfg = cfg or AdamWConfig()
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> float:
        c = self.cfg
        norm = clip_by_global_norm(grads, c.grad_clip)
        self.t += 1
        b1, b2 = c.betas
        bc1 = 1 - b1**self.t
        bc2 = 1 - b2**self.t
        for n, p in self.params.items():
            g = grads.get(n)
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay and p.data.ndim >= 2:
                p.data *= np.asarray(1 - lr * c.weight_decay, dtype=p.dtype)
            p.data -= (lr * upd).astype(p.dtype, copy=False)
        return norm
