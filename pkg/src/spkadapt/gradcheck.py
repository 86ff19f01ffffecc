"""Central finite-difference checks against the tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward, zero_grads


def numerical_grads(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6
) -> list[np.ndarray]:
    """d fn() / d input by central differences, one entry at a time."""
    out = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out.append(g)
    return out


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
    zero_grads(inputs)
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    return [t.grad.copy() for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger gradient magnitude."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6
) -> float:
    """Largest relative error over all inputs."""
    a = analytic_grads(fn, inputs)
    n = numerical_grads(fn, inputs, eps)
    return max(relative_error(x, y) for x, y in zip(a, n))
