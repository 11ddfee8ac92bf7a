"""Loop kernels for depthwise convolution, compiled with numba when present.

Summation order is fixed by the loop nest, so results are reproducible.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _dw_forward(xp, w, stride, ho, wo):
    b_n, c_n = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    out = np.zeros((b_n, c_n, ho, wo))
    for b in range(b_n):
        for c in range(c_n):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    for h in range(ho):
                        for x in range(wo):
                            out[b, c, h, x] += xp[b, c, h * stride + i, x * stride + j] * wv
    return out


def _dw_backward(g, xp, w, stride):
    b_n, c_n, ho, wo = g.shape
    k = w.shape[1]
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for b in range(b_n):
        for c in range(c_n):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    acc = 0.0
                    for h in range(ho):
                        for x in range(wo):
                            gv = g[b, c, h, x]
                            gxp[b, c, h * stride + i, x * stride + j] += gv * wv
                            acc += gv * xp[b, c, h * stride + i, x * stride + j]
                    gw[c, i, j] += acc
    return gxp, gw


def _dw_backward_input(g, w, stride, hp, wp):
    b_n, c_n, ho, wo = g.shape
    k = w.shape[1]
    gxp = np.zeros((b_n, c_n, hp, wp))
    for b in range(b_n):
        for c in range(c_n):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    for h in range(ho):
                        for x in range(wo):
                            gxp[b, c, h * stride + i, x * stride + j] += g[b, c, h, x] * wv
    return gxp


if njit is not None:
    dw_forward = njit(cache=True)(_dw_forward)
    dw_backward = njit(cache=True)(_dw_backward)
    dw_backward_input = njit(cache=True)(_dw_backward_input)
else:  # pragma: no cover
    dw_forward = None
    dw_backward = None
    dw_backward_input = None


def _bn_train_forward(x3, gamma, beta, eps):
    """x3 is [B, C, S]; returns (out, xhat, mean, var, inv_std)."""
    b_n, c_n, s_n = x3.shape
    m = b_n * s_n
    out = np.empty(x3.shape)
    xhat = np.empty(x3.shape)
    mean = np.zeros(c_n)
    var = np.zeros(c_n)
    inv_std = np.empty(c_n)
    for c in range(c_n):
        acc = 0.0
        for b in range(b_n):
            for s in range(s_n):
                acc += x3[b, c, s]
        mu = acc / m
        acc = 0.0
        for b in range(b_n):
            for s in range(s_n):
                d = x3[b, c, s] - mu
                acc += d * d
        v = acc / m
        inv = 1.0 / np.sqrt(v + eps)
        mean[c], var[c], inv_std[c] = mu, v, inv
        for b in range(b_n):
            for s in range(s_n):
                xh = (x3[b, c, s] - mu) * inv
                xhat[b, c, s] = xh
                out[b, c, s] = xh * gamma[c] + beta[c]
    return out, xhat, mean, var, inv_std


def _bn_train_backward(g3, xhat, gamma, inv_std):
    b_n, c_n, s_n = g3.shape
    m = b_n * s_n
    gx = np.empty(g3.shape)
    ggamma = np.zeros(c_n)
    gbeta = np.zeros(c_n)
    for c in range(c_n):
        s1 = 0.0
        s2 = 0.0
        for b in range(b_n):
            for s in range(s_n):
                gv = g3[b, c, s]
                s1 += gv
                s2 += gv * xhat[b, c, s]
        ggamma[c], gbeta[c] = s2, s1
        k = gamma[c] * inv_std[c] / m
        for b in range(b_n):
            for s in range(s_n):
                gx[b, c, s] = k * (m * g3[b, c, s] - s1 - xhat[b, c, s] * s2)
    return gx, ggamma, gbeta


if njit is not None:
    bn_train_forward = njit(cache=True)(_bn_train_forward)
    bn_train_backward = njit(cache=True)(_bn_train_backward)
else:  # pragma: no cover
    bn_train_forward = None
    bn_train_backward = None
