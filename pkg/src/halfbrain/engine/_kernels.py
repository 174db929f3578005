"""Fused elementwise kernels compiled with numba."""

import numba
import numpy as np


@numba.njit(cache=True)
def leaky_forward(x, slope):
    out = np.empty_like(x)
    xf = x.ravel()
    of = out.ravel()
    for i in range(xf.size):
        v = xf[i]
        of[i] = v if v > 0 else v * slope
    return out


@numba.njit(cache=True)
def leaky_backward(g, x, slope):
    out = np.empty_like(g)
    gf = g.ravel()
    xf = x.ravel()
    of = out.ravel()
    for i in range(xf.size):
        of[i] = gf[i] if xf[i] > 0 else gf[i] * slope
    return out


@numba.njit(cache=True)
def bn_train_forward(x, gamma, beta, eps):
    """x: [N, C, M] contiguous. Returns (out, xhat, mean, var, inv_std)."""
    n, c, m = x.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    for j in range(c):
        s = 0.0
        for i in range(n):
            for k in range(m):
                s += x[i, j, k]
        mu = s / (n * m)
        ss = 0.0
        for i in range(n):
            for k in range(m):
                d = x[i, j, k] - mu
                ss += d * d
        mean[j] = mu
        var[j] = ss / (n * m)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for i in range(n):
        for j in range(c):
            mu = x.dtype.type(mean[j])
            iv = x.dtype.type(inv_std[j])
            gm = gamma[j]
            bt = beta[j]
            for k in range(m):
                h = (x[i, j, k] - mu) * iv
                xhat[i, j, k] = h
                out[i, j, k] = h * gm + bt
    return out, xhat, mean, var, inv_std


@numba.njit(cache=True)
def bn_train_backward(g, xhat, gamma, inv_std):
    n, c, m = g.shape
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for j in range(c):
        sb = 0.0
        sg = 0.0
        for i in range(n):
            for k in range(m):
                sb += g[i, j, k]
                sg += g[i, j, k] * xhat[i, j, k]
        dbeta[j] = sb
        dgamma[j] = sg
    total = n * m
    dx = np.empty_like(g)
    for i in range(n):
        for j in range(c):
            # dxhat = g * gamma, so the channel sums are gamma * (dbeta, dgamma)
            a = gamma[j] * inv_std[j]
            s1 = dbeta[j] / total
            s2 = dgamma[j] / total
            a32 = g.dtype.type(a)
            s1_32 = g.dtype.type(s1)
            s2_32 = g.dtype.type(s2)
            for k in range(m):
                dx[i, j, k] = a32 * (g[i, j, k] - s1_32 - xhat[i, j, k] * s2_32)
    return dx, dgamma, dbeta


@numba.njit(cache=True)
def im2col(xp, k, stride, ho, wo):
    """Padded ``xp[N,C,Hp,Wp]`` -> rows ``(n, y, x)``, columns ``(c, i, j)``."""
    n, c, _, _ = xp.shape
    hw = ho * wo
    cols = np.empty((n * hw, c * k * k), dtype=xp.dtype)
    # source-contiguous loop order; the strided side is the write
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    col = (ch * k + i) * k + j
                    for y in range(ho):
                        r = b * hw + y * wo
                        for x in range(wo):
                            cols[r + x, col] = xp[b, ch, y * stride + i, x * stride + j]
    return cols


@numba.njit(cache=True)
def col2im(dcols, n, c, hp, wp, k, stride, ho, wo):
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    hw = ho * wo
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    col = (ch * k + i) * k + j
                    for y in range(ho):
                        r = b * hw + y * wo
                        for x in range(wo):
                            dxp[b, ch, y * stride + i, x * stride + j] += dcols[r + x, col]
    return dxp


@numba.njit(cache=True)
def pool_forward(x, kh, kw):
    n, c, h, w = x.shape
    ho = h // kh
    wo = w // kw
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    inv = 1.0 / (kh * kw)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    s = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            s += x[b, ch, y * kh + i, xx * kw + j]
                    out[b, ch, y, xx] = s * inv
    return out


@numba.njit(cache=True)
def pool_backward(g, h, w, kh, kw):
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    inv = g.dtype.type(1.0 / (kh * kw))
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    v = g[b, ch, y, xx] * inv
                    for i in range(kh):
                        for j in range(kw):
                            dx[b, ch, y * kh + i, xx * kw + j] = v
    return dx
