"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """d f() / d x by central differences; ``f`` re-reads ``x.data`` on every call."""
    x.data = np.ascontiguousarray(x.data)
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().data.sum())
        flat[i] = orig - h
        down = float(f().data.sum())
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(max|a|, max|b|), the scale-aware error used by the checks."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    """Worst relative error between analytic and numerical gradients over ``inputs``.

    ``f`` must build a fresh graph on each call; its output is summed.
    """
    for t in inputs:
        t.grad = None
    out = f()
    loss = out.sum() if out.size != 1 else out
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(f, t, h)))
    return worst
