"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

import numpy as np

from .tensor import backward


def numeric_grad(f, tensor, eps=1e-5, indices=None):
    """Central differences of the scalar ``f()`` with respect to ``tensor.data``.

    Only the flat positions in ``indices`` are probed when it is given; the
    rest of the result stays zero.
    """
    g = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic, numeric, floor=1e-6):
    """Element-wise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(f, tensors, eps=1e-5, floor=1e-6, max_entries=None, seed=0):
    """Largest element-wise relative error between backward and finite differences.

    ``f`` must rebuild the graph on every call and return a scalar tensor.
    With ``max_entries``, each tensor is probed at that many randomly chosen
    positions instead of everywhere.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = rng.choice(t.data.size, max_entries, replace=False)
        numeric = numeric_grad(f, t, eps, idx)
        a = np.asarray(analytic).reshape(-1)
        n = numeric.reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst
