"""Central finite-difference oracle for checking reverse-mode gradients.

The oracle only ever calls the forward function under ``no_grad`` and perturbs
raw arrays in place; it shares nothing with the backward rules it checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape

FD_STEP = 1e-6


def numeric_grad(
    f: Callable[[], float], array: np.ndarray, step: float = FD_STEP, indices=None
) -> np.ndarray:
    """d f / d array by central differences, optionally at a subset of flat indices."""
    flat = array.reshape(-1)
    out = np.zeros(flat.shape)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(array.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error: max |a - n| over max(|a|, |n|), floored at 1e-12."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


@dataclass
class GradReport:
    name: str
    error: float
    checked: int
    abs_diff: float = 0.0
    scale: float = 0.0


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Sequence[str] | None = None,
    step: float = FD_STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradReport]:
    """Compare backward() against central differences for every tensor in ``params``.

    ``loss_fn`` must rebuild the forward graph on each call and be
    deterministic. With ``max_entries`` set, larger tensors are checked at a
    random subset of coordinates.
    """
    names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(params)]
    for p in params:
        p.zero_grad()
    reset_tape()
    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return loss_fn().item()

    rng = rng or np.random.default_rng(0)
    reports = []
    for name, p, a in zip(names, params, analytic):
        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        num = numeric_grad(value, p.data, step, idx)
        a_flat, n_flat = a.reshape(-1), num.reshape(-1)
        if idx is not None:
            a_flat, n_flat = a_flat[idx], n_flat[idx]
        diff = float(np.abs(a_flat - n_flat).max()) if a_flat.size else 0.0
        scale = float(max(np.abs(a_flat).max(), np.abs(n_flat).max())) if a_flat.size else 0.0
        reports.append(GradReport(name, relative_error(a_flat, n_flat), a_flat.size, diff, scale))
    return reports


def max_error(reports: Sequence[GradReport]) -> float:
    """Worst per-tensor relative error."""
    return max((r.error for r in reports), default=0.0)


def normwise_error(reports: Sequence[GradReport]) -> float:
    """Worst absolute deviation over all tensors, relative to the largest gradient entry.

    This is the relative error of the whole gradient vector in the max norm.
    Unlike :func:`max_error` it stays meaningful when some tensor's true
    gradient sits near the finite-difference roundoff floor (about one ulp of
    the loss divided by the step).
    """
    if not reports:
        return 0.0
    scale = max(max(r.scale for r in reports), 1e-12)
    return max(r.abs_diff for r in reports) / scale
