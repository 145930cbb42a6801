"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(fn, tensor: Tensor, eps=1e-5, max_entries=None, rng=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``.

    With ``max_entries`` only a random subset of entries is probed; the
    returned mask marks which ones.
    """
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
    grad = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = float(fn().data)
        flat[i] = old - eps
        lo = float(fn().data)
        flat[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    mask = np.zeros(flat.size, dtype=bool)
    mask[idx] = True
    return grad.reshape(tensor.shape), mask.reshape(tensor.shape)


def check_gradients(fn, tensors, eps=1e-5, max_entries=None, seed=0):
    """Max relative error between analytic and numeric gradients over ``tensors``.

    ``fn`` must build a fresh graph on every call and return a scalar Tensor.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n, mask = numeric_grad(fn, t, eps, max_entries, rng)
        worst = max(worst, relative_error(a[mask], n[mask]))
    return worst
