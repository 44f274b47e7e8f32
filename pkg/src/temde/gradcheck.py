"""Central finite-difference gradient checking, shared by the test-suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from temde.tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d f() / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|)``; 0 when both norms sit under ``floor``.

    The floor absorbs gradients that are structurally zero (a bias feeding a
    batch norm) where the finite difference only sees rounding noise.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5
) -> list[float]:
    """Relative error between backprop and finite differences for each input.

    ``f`` must be a closure rebuilding the scalar output from ``inputs``.
    """
    for x in inputs:
        x.zero_grad()
    f().backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    return [relative_error(a, numerical_grad(f, x, eps)) for a, x in zip(analytic, inputs)]
