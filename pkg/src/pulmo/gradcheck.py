"""Central finite-difference gradient checking in float64."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, float64_mode


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|) over the tensor; 0 when both vanish.

    Normalising by the tensor's largest entry keeps near-zero entries, where the
    step's truncation error dominates, from swamping the comparison.
    """
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    diff = float(np.abs(a - n).max(initial=0.0))
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)))
    return diff / scale if scale > 1e-12 else diff


def numeric_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], upstream: np.ndarray, eps: float = 1e-3):
    grads = []
    with float64_mode():
        for k, base in enumerate(arrays):
            g = np.zeros_like(base)
            flat = base.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                fp = float((fn(*[Tensor(a) for a in arrays]).data * upstream).sum())
                flat[i] = old - eps
                fm = float((fn(*[Tensor(a) for a in arrays]).data * upstream).sum())
                flat[i] = old
                g.reshape(-1)[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], upstream: np.ndarray):
    with float64_mode():
        inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*inputs)
        (out * Tensor(upstream)).sum().backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def gradcheck(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    rng: np.random.Generator | None = None,
    eps: float = 1e-3,
) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` receives one Tensor per array. The output is contracted against a
    random upstream gradient so every output element contributes.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with float64_mode():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    upstream = rng.uniform(0.5, 1.5, size=out_shape) * rng.choice([-1.0, 1.0], size=out_shape)
    a = analytic_grads(fn, arrays, upstream)
    n = numeric_grads(fn, arrays, upstream, eps)
    return max(relative_error(x, y) for x, y in zip(a, n))
