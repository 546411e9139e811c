"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise difference, scaled by the gradient's magnitude.

    Scaling by the tensor's peak magnitude rather than each entry keeps
    near-zero entries (where rounding noise dominates) from blowing up the ratio.
    """
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_gradient(f: Callable[[], Tensor], x: np.ndarray, h: float) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h for every entry of ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    ``f(*inputs)`` must return a scalar tensor and be deterministic (fix any
    randomness inside ``f``).  Inputs are perturbed in place and restored.
    """
    for t in inputs:
        t.requires_grad = True
    loss = f(*inputs)
    grads = backward(loss, params=inputs)
    worst = 0.0
    for t in inputs:
        numeric = numeric_gradient(lambda: f(*inputs), t.data, h)
        worst = max(worst, relative_error(grads[t], numeric))
    return worst
