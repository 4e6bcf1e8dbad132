"""Finite-difference verification of taped gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tape, Tensor, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    rel_error: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[ParamCheck] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [f"{e.name}: rel={e.rel_error:.2e} over {e.n_checked} coords "
                 f"{'ok' if e.passed else 'FAIL'}" for e in self.entries]
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
    floor: float = 1e-10,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and rebuild its graph from ``params`` on each
    call.  Error per parameter is ``|a - n| / max(|a|, |n|)`` over the checked
    coordinates (absolute when both norms fall below ``floor``).  Large
    parameters are checked on a seeded random subset of ``max_coords`` entries.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 parameters, got {p.dtype}")
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for i, p in enumerate(params):
        analytic = grads[p]
        size = p.data.size
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = np.arange(size)
        flat = p.data.reshape(-1)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            with no_grad():
                flat[c] = orig + step
                fp = float(fn().data)
                flat[c] = orig - step
                fm = float(fn().data)
            flat[c] = orig
            num[j] = (fp - fm) / (2 * step)
        ana = analytic.reshape(-1)[coords]
        diff = float(np.linalg.norm(ana - num))
        denom = max(float(np.linalg.norm(ana)), float(np.linalg.norm(num)))
        rel = diff / denom if denom > floor else diff
        report.entries.append(ParamCheck(p.name or f"param{i}", rel, len(coords), rel <= tol))
    return report
