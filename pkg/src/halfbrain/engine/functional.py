"""Neural-network operations.

Convolution is exposed twice: as raw numpy kernels (:func:`conv2d_forward`,
:func:`conv2d_backward`) that pass an explicit cache, and as the graph-recording
:func:`conv2d` built on top of them. Every other op records its own backward
closure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError, StateError
from . import _kernels
from .tensor import Tensor, check_finite, make

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

LAYER_KINDS = ("conv2d", "batchnorm2d", "leaky_relu", "avgpool2d", "fully_connected")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 0
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "avgpool2d"):
            if self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ConfigError(f"invalid {self.kind} geometry {self}")

    @classmethod
    def conv(cls, in_channels, out_channels, kernel=3, stride=1, padding=1):
        return cls("conv2d", kernel, stride, padding, in_channels, out_channels)

    @classmethod
    def pool(cls, kernel=2, stride=2, padding=0):
        return cls("avgpool2d", kernel, stride, padding)


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


# --------------------------------------------------------------- convolution
def conv2d_forward(x, w, b, stride=1, padding=1):
    """Cross-correlate ``x[N,C,H,W]`` with ``w[F,C,k,k]``; returns ``(out, cache)``."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"input has {c} channels, weight expects {cw}")
    if kh != kw:
        raise DimensionError("only square kernels are supported")
    if b is not None and np.shape(b) != (f,):
        raise DimensionError(f"bias shape {np.shape(b)} != ({f},)")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{wd} too small for kernel {k} with padding {padding}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _kernels.im2col(np.ascontiguousarray(xp), k, stride, ho, wo)
    wmat = np.ascontiguousarray(w.reshape(f, c * k * k))
    out = cols @ wmat.T
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(n, ho * wo, f).transpose(0, 2, 1)).reshape(n, f, ho, wo)
    check_finite(out, "conv2d output")
    cache = (cols, wmat, x.shape, w.shape, stride, padding, b is not None)
    return out, cache


def conv2d_backward(dout, cache, need_dx=True):
    """Gradients ``(dx, dw, db)`` for :func:`conv2d_forward`; ``dx`` is None unless needed."""
    if cache is None:
        raise StateError("conv2d_backward needs the cache saved by a tracked forward pass")
    cols, wmat, xshape, wshape, stride, padding, has_bias = cache
    n, c, h, wd = xshape
    f, _, k, _ = wshape
    ho, wo = dout.shape[2], dout.shape[3]
    dcol = np.ascontiguousarray(dout.reshape(n, f, ho * wo).transpose(0, 2, 1)).reshape(-1, f)
    dw = (dcol.T @ cols).reshape(wshape)
    db = np.einsum("rf->f", dcol, dtype=np.float64).astype(dout.dtype) if has_bias else None
    if not need_dx:
        return None, dw, db
    dcols = dcol @ wmat
    dxp = _kernels.col2im(dcols, n, c, h + 2 * padding, wd + 2 * padding, k, stride, ho, wo)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d(x, w, b=None, stride=1, padding=1):
    out, cache = conv2d_forward(x.data, w.data, None if b is None else b.data, stride, padding)

    def backward(g):
        dx, dw, db = conv2d_backward(g, cache, need_dx=x.requires_grad)
        return (dx, dw) if b is None else (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward)


# ------------------------------------------------------------- batch norm
def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays) are updated in place; in eval mode only the
    running statistics are read.
    """
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"batchnorm2d expects [N,C,H,W], got {xd.shape}")
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must have one entry per channel")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        if xd.shape[0] < 2:
            raise ConfigError("batchnorm2d in training mode needs a batch of at least 2")
        n, _, h, w = xd.shape
        m = n * h * w
        x3 = np.ascontiguousarray(xd).reshape(n, c, h * w)
        out, xhat, mu, var, inv_std = _kernels.bn_train_forward(
            x3, gamma.data.astype(xd.dtype), beta.data.astype(xd.dtype), eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def backward(g):
            g3 = np.ascontiguousarray(g).reshape(n, c, h * w)
            dx, dgamma, dbeta = _kernels.bn_train_backward(
                g3, xhat, gamma.data.astype(np.float64), inv_std)
            return dx.reshape(xd.shape), dgamma, dbeta

        return make(out.reshape(xd.shape), (x, gamma, beta), backward)

    inv_std = (1.0 / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps))
    scale = (inv_std * gamma.data).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = ((xd - np.asarray(running_mean, dtype=xd.dtype).reshape(1, c, 1, 1))
            * inv_std.astype(xd.dtype).reshape(1, c, 1, 1))
    out = xhat * g4 + b4

    def backward_eval(g):
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
        dgamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        return g * scale, dgamma, dbeta

    return make(out, (x, gamma, beta), backward_eval)


# ----------------------------------------------------------- activations etc.
def leaky_relu(x, slope=LEAKY_SLOPE):
    xd = np.ascontiguousarray(x.data)
    s = xd.dtype.type(slope)
    out = _kernels.leaky_forward(xd, s)
    return make(out, (x,), lambda g: (_kernels.leaky_backward(np.ascontiguousarray(g), xd, s),))


def pool_kernel(h, w, kernel=2):
    """Per-axis pooling window: axes already at extent 1 are left alone."""
    return (kernel if h >= kernel else 1, kernel if w >= kernel else 1)


def avgpool2d(x, kernel=2, stride=None):
    """Average pooling with zero padding; ``kernel`` may be an int or (kh, kw).

    Trailing rows/columns that do not fill a window are dropped (floor).
    """
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
    sh, sw = (kh, kw) if stride is None else ((stride, stride) if np.isscalar(stride) else stride)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"avgpool2d expects [N,C,H,W], got {xd.shape}")
    n, c, h, w = xd.shape
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} smaller than pooling window {kh}x{kw}")
    if (kh, kw) == (1, 1) and (sh, sw) == (1, 1):
        return x
    if (sh, sw) == (kh, kw):
        out = _kernels.pool_forward(np.ascontiguousarray(xd), kh, kw)

        def backward(g):
            return (_kernels.pool_backward(np.ascontiguousarray(g), h, w, kh, kw),)

        return make(out, (x,), backward)

    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    out = win.mean(axis=(4, 5), dtype=np.float64).astype(xd.dtype)

    def backward_strided(g):
        dx = np.zeros_like(xd)
        share = (g / (kh * kw)).astype(xd.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += share
        return (dx,)

    return make(out, (x,), backward_strided)


def upsample2d(x, scale=2):
    """Nearest-neighbour upsampling of the two trailing axes."""
    xd = x.data
    out = np.repeat(np.repeat(xd, scale, axis=-2), scale, axis=-1)

    def backward(g):
        shp = g.shape[:-2] + (xd.shape[-2], scale, xd.shape[-1], scale)
        return (g.reshape(shp).sum(axis=(-3, -1), dtype=np.float64).astype(xd.dtype),)

    return make(out, (x,), backward)


def fully_connected(x, w, b=None):
    """``x[N,D] @ w[O,D].T + b[O]``."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"fully_connected: input {xd.shape} incompatible with weight {wd.shape}")
    out = xd @ wd.T
    if b is not None:
        if b.shape != (wd.shape[0],):
            raise DimensionError(f"bias shape {b.shape} != ({wd.shape[0]},)")
        out = out + b.data

    def backward(g):
        dx = g @ wd
        dw = g.T @ xd
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=0, dtype=np.float64)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward)


# ----------------------------------------------------------------- softmax
def _softmax_np(z):
    z64 = z.astype(np.float64)
    z64 = z64 - z64.max(axis=-1, keepdims=True)
    e = np.exp(z64)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Row softmax over the last axis (stabilized by subtracting the row max)."""
    p = _softmax_np(x.data)
    out = p.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dx = p * (g64 - (g64 * p).sum(axis=-1, keepdims=True))
        return (dx.astype(x.dtype),)

    return make(out, (x,), backward)


def softmax_cross_entropy(logits, target, weights=None):
    """Weighted mean of ``-log softmax(logits)[target]``.

    ``weights`` (one per row) turn this into a masked mean; when every weight is
    zero the loss is exactly 0 with zero gradient.
    """
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"logits must be [N,K], got {z.shape}")
    target = np.asarray(target, dtype=np.int64)
    if target.shape != (z.shape[0],):
        raise DimensionError(f"target shape {target.shape} != ({z.shape[0]},)")
    if target.size and (target.min() < 0 or target.max() >= z.shape[1]):
        raise DimensionError("target index out of range")
    w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (z.shape[0],):
        raise DimensionError("weights must have one entry per row")
    total = w.sum()
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    nll = logsum - shifted[np.arange(len(target)), target]
    if total == 0:
        loss = np.array(0.0)
    else:
        loss = np.array((w * nll).sum() / total)
    out = loss.astype(z.dtype)

    def backward(g):
        if total == 0:
            return (np.zeros_like(z),)
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(len(target)), target] -= 1.0
        return ((p * (w / total)[:, None] * float(g)).astype(z.dtype),)

    return make(out, (logits,), backward)


def mse_loss(pred, target):
    diff = pred.data.astype(np.float64) - np.asarray(target.data if isinstance(target, Tensor) else target)
    out = np.array((diff ** 2).mean()).astype(pred.dtype)
    n = diff.size

    tgt = target if isinstance(target, Tensor) else Tensor(target)

    def backward(g):
        d = (2.0 / n) * diff * float(g)
        return d.astype(pred.dtype), (-d).astype(tgt.dtype)

    return make(out, (pred, tgt), backward)
