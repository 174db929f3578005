"""Central finite-difference checks for graph ops, evaluated in float64."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(f, arrays, h=1e-3):
    """d f(*arrays) / d arrays[i] by central differences; ``f`` returns a float."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            down = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-4):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_op(op, arrays, rng=None, h=1e-3):
    """Compare the autodiff gradient of ``sum(op(*tensors) * R)`` with finite differences.

    ``R`` is a fixed random projection so every output element contributes.
    Returns the worst component-wise relative error over all inputs.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * proj).sum())

    numeric = numerical_gradient(scalar, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
