"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np


ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    errors: Dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    n_kinks: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def numeric_grad(f, arr: np.ndarray, idx, step: float = 1e-5, pattern=None):
    """Central difference at ``arr[idx]``.

    With a ``pattern`` callable (e.g. ReLU masks and argmax indices) the
    return value is ``(grad, crossed)`` where ``crossed`` tells whether the
    pattern differs between the two evaluation points.
    """
    old = arr[idx]
    h = step * max(1.0, abs(float(old)))
    arr[idx] = old + h
    fp = f()
    sp = pattern() if pattern else None
    arr[idx] = old - h
    fm = f()
    sm = pattern() if pattern else None
    arr[idx] = old
    g = (fp - fm) / (2.0 * h)
    if pattern is None:
        return g
    return g, sp != sm


def grad_check(
    f: Callable[[], float],
    inputs: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    tol: float,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    step: float = 1e-5,
    pattern: Optional[Callable[[], object]] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``f``.

    ``f`` is a zero-argument closure reading the arrays in ``inputs``, which
    are perturbed in place and restored.  The relative error of a coordinate
    is ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is 1e-6 times the
    largest gradient magnitude seen across all inputs, and never below
    ``ABS_FLOOR``: below that size central differences are dominated by
    round-off (about machine epsilon * |f| / step), so such coordinates are
    judged on an absolute scale.  Before dividing, the difference is reduced
    by a round-off allowance of ``10 * eps * max(1, |f|) / step``, the
    precision limit of the central difference itself (this matters for
    gradients that are exactly zero, e.g. a key bias under softmax).
    With ``max_coords`` only that many randomly chosen coordinates per input
    are checked.

    ``pattern`` should return a hashable summary of every non-smooth decision
    in ``f`` (ReLU masks, argmax positions).  A coordinate whose perturbation
    changes it straddles a kink; it is re-differenced with steps 100x and
    10000x smaller, and counted in ``n_kinks``.
    """
    rng = rng or np.random.default_rng(0)
    n_kinks = 0
    f0 = float(f())
    roundoff = 10.0 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / step
    pairs = {}
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 arrays, {name} is {arr.dtype}")
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != arr.shape:
            raise ValueError(f"analytic gradient for {name} has shape {a.shape}, expected {arr.shape}")
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        num = np.empty(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, arr.shape)
            if pattern is None:
                num[j] = numeric_grad(f, arr, idx, step)
                continue
            num[j], crossed = numeric_grad(f, arr, idx, step, pattern)
            if crossed:
                n_kinks += 1
                for shrink in (1e-2, 1e-4):
                    num[j], crossed = numeric_grad(f, arr, idx, step * shrink, pattern)
                    if not crossed:
                        break
        pairs[name] = (a.reshape(-1)[flat_idx], num)
    scale = max((max(np.abs(x).max(initial=0.0), np.abs(n).max(initial=0.0)) for x, n in pairs.values()), default=0.0)
    floor = max(1e-6 * scale, ABS_FLOOR)
    errors = {}
    for name, (ana, num) in pairs.items():
        rel = np.maximum(np.abs(ana - num) - roundoff, 0.0) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        errors[name] = float(rel.max(initial=0.0))
    n_checked = sum(len(n) for _, n in pairs.values())
    worst = max(errors.values(), default=0.0)
    return GradCheckReport(worst, tol, errors, n_checked, n_kinks)
