"""Central finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .tensor import DeterminismError, Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    max_abs_error_small: float = 0.0
    n_small: int = 0
    per_param: Dict[str, float] = field(default_factory=dict)
    worst: Optional[Tuple[str, tuple, float, float]] = None
    counts: Dict[str, int] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4, abs_tol: float = 1e-7) -> bool:
        return self.max_rel_error < tol and self.max_abs_error_small < abs_tol

    def covered(self) -> List[str]:
        return [n for n, c in self.counts.items() if c > 0]


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _sample_coords(grad: np.ndarray, k: int, floor: float,
                   rng: np.random.Generator) -> Tuple[List[tuple], List[tuple]]:
    """Split a sample into coordinates whose adjoint clears ``floor`` (checked
    by relative error) and near-zero ones (checked by absolute error).

    Central differences in double precision carry roundoff near
    eps*|L|/h ~ 1e-11, so a relative error is only meaningful well above it.
    """
    flat = np.abs(grad).ravel()
    big = np.flatnonzero(flat >= floor)
    small = np.flatnonzero(flat < floor)
    pick_big = rng.choice(big, size=min(k, big.size), replace=False) if big.size else big
    n_small = max(1, k // 4) if small.size else 0
    pick_small = rng.choice(small, size=min(n_small, small.size), replace=False) if n_small else small
    unravel = lambda ids: [np.unravel_index(int(i), grad.shape) for i in np.sort(ids)]
    return unravel(pick_big), unravel(pick_small)


def check_gradients(params: Mapping[str, Tensor], loss_fn: Callable[[], Tensor],
                    h: float = 1e-5, coords_per_param: int = 8,
                    rng: Optional[np.random.Generator] = None,
                    floor: float = 1e-5) -> GradCheckResult:
    """Compare analytic adjoints with (L(t+h) - L(t-h)) / 2h.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values and be deterministic.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    for p in params.values():
        if p.dtype != np.float64:
            raise ValueError("gradient checks require float64 parameters")
    rng = rng if rng is not None else np.random.default_rng(0)

    with no_grad():
        l1 = loss_fn().data.copy()
        l2 = loss_fn().data.copy()
    if not np.array_equal(l1, l2):
        raise DeterminismError("two identical forward passes differ")

    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}

    result = GradCheckResult(max_rel_error=0.0, n_coords=0)

    def numeric(p, idx):
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + h
            lp = float(loss_fn().data)
            p.data[idx] = orig - h
            lm = float(loss_fn().data)
        p.data[idx] = orig
        return (lp - lm) / (2.0 * h)

    for name, p in params.items():
        big, small = _sample_coords(analytic[name], coords_per_param, floor, rng)
        worst = 0.0
        for idx in big:
            num = numeric(p, idx)
            a = float(analytic[name][idx])
            err = rel_error(a, num)
            worst = max(worst, err)
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, tuple(int(i) for i in idx), a, num)
        for idx in small:
            a, num = float(analytic[name][idx]), numeric(p, idx)
            result.max_abs_error_small = max(result.max_abs_error_small, abs(a - num))
            if abs(num) >= floor:
                # a vanishing analytic adjoint against a real slope is a failure
                err = rel_error(a, num)
                worst = max(worst, err)
                if err > result.max_rel_error:
                    result.max_rel_error = err
                    result.worst = (name, tuple(int(i) for i in idx), a, num)
        result.per_param[name] = worst
        result.counts[name] = len(big)
        result.n_coords += len(big)
        result.n_small += len(small)
    for p in params.values():
        p.grad = None
    return result


def finite_diff_check(params: Mapping[str, Tensor], loss_fn: Callable[[], Tensor],
                      h: float = 1e-5, coords_per_param: int = 8,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    return check_gradients(params, loss_fn, h, coords_per_param, rng).max_rel_error
