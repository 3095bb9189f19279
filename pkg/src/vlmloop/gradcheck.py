"""Central-difference gradient verification.

The comparison metric is, per checked tensor, the largest absolute deviation
between analytic and numeric gradients divided by the larger of the two
gradients' own largest magnitudes.  Per-coordinate ratios are meaningless for
near-zero entries, so the scale is taken per tensor, not per coordinate.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, copy=True)
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic.astype(np.float64) - numeric)) / scale)


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float | None = None) -> float:
    """Worst relative error between f's analytic gradient at `point` and
    central finite differences.  `f` must return a scalar tensor and be a
    pure function of its argument."""
    if eps is None:
        eps = 1e-6 if point.data.dtype == np.float64 else 4e-3

    probe = Tensor(point.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    def scalar_f(x: np.ndarray) -> float:
        return float(f(Tensor(x.astype(point.data.dtype))).data)

    numeric = numeric_grad(scalar_f, point.data, eps)
    return relative_error(analytic, numeric)
