"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; only ``entries`` (flat indices) when given."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x)).item()
        flat[i] = orig - h
        fm = f(Tensor(x)).item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    tape = Tape()
    xt = tape.watch(x)
    return tape.backward(f(xt))[xt]


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape and central-difference gradients of scalar ``f`` at ``x``.

    The relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``max_entries`` only a random subset of entries is probed.
    """
    x = np.array(x, dtype=np.float64)
    entries = None
    if max_entries is not None and x.size > max_entries:
        rng = rng if rng is not None else np.random.default_rng(0)
        entries = np.sort(rng.choice(x.size, size=max_entries, replace=False))
    a = analytic_gradient(f, x).reshape(-1)
    n = numerical_gradient(f, x, h, entries).reshape(-1)
    if entries is not None:
        a, n = a[entries], n[entries]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))
