"""Differentiable primitives needed by the SuperNet.

Each primitive computes its forward value with numpy and returns a
vector-Jacobian closure. ``apply_primitive`` dispatches by kind, validates
shapes, and records the node on the active tape.
"""

from __future__ import annotations

from typing import Any, Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import DEBUG, Node, Tensor, active_tape

PRIMITIVES: dict[str, Callable] = {}


def _primitive(kind: str):
    def register(fn):
        PRIMITIVES[kind] = fn
        return fn

    return register


class ShapeError(ValueError):
    pass


def _need(cond: bool, kind: str, inputs: Sequence[Tensor], why: str) -> None:
    if not cond:
        shapes = [t.shape for t in inputs]
        raise ShapeError(f"{kind}: {why}; got input shapes {shapes}")


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: Mapping[str, Any] | None = None) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    inputs = tuple(inputs)
    if inputs and inputs[0].data.ndim > 0 and inputs[0].shape[0] == 0:
        raise ValueError(f"{kind}: zero-sized batch")
    out_data, vjp = fn(inputs, dict(attrs or {}))
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if DEBUG and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{kind}: non-finite output")
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(Node(kind, inputs, out, vjp))
    return out


# -- dense -----------------------------------------------------------------


@_primitive("linear")
def _linear(inputs, attrs):
    x, w = inputs[0], inputs[1]
    b = inputs[2] if len(inputs) > 2 else None
    _need(x.data.ndim == 2 and w.data.ndim == 2 and x.shape[1] == w.shape[1], "linear", inputs,
          "expected x[B,I] and W[O,I]")
    if b is not None:
        _need(b.shape == (w.shape[0],), "linear", inputs, "bias must be [O]")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def vjp(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return out, vjp


# -- convolutions ------------------------------------------------------------


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(gwin: np.ndarray, padded_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``_windows``: gwin is [B, C, Ho, Wo, k, k]."""
    ho, wo = gwin.shape[2], gwin.shape[3]
    gxp = np.zeros(padded_shape)
    for di in range(k):
        for dj in range(k):
            gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gwin[:, :, :, :, di, dj]
    h, w = padded_shape[2] - 2 * pad, padded_shape[3] - 2 * pad
    return gxp[:, :, pad:pad + h, pad:pad + w]


def _check_conv(kind, inputs, x, k, stride):
    _need(x.data.ndim == 4, kind, inputs, "input must be NCHW")
    _need(stride in (1, 2), kind, inputs, f"stride must be 1 or 2, got {stride}")
    _need(k % 2 == 1, kind, inputs, "kernel size must be odd for same padding")


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(a)
    b, c, h, w = a.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    out[:, :, pad:pad + h, pad:pad + w] = a
    return out


@_primitive("conv2d")
def _conv2d(inputs, attrs):
    x, w = inputs
    stride = int(attrs.get("stride", 1))
    _need(w.data.ndim == 4 and w.shape[2] == w.shape[3], "conv2d", inputs, "weight must be [O,C,k,k]")
    k = w.shape[2]
    _check_conv("conv2d", inputs, x, k, stride)
    _need(x.shape[1] == w.shape[1], "conv2d", inputs, "channel mismatch")

    if k == 1:
        xs = x.data[:, :, ::stride, ::stride]
        b, c, h, wd = xs.shape
        xf = xs.reshape(b, c, h * wd)
        w2 = w.data[:, :, 0, 0]
        out = np.matmul(w2, xf).reshape(b, -1, h, wd)

        def vjp(g):
            gf = g.reshape(b, -1, h * wd)
            gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2]))[:, :, None, None] if w.requires_grad else None
            if not x.requires_grad:
                return None, gw
            gxs = np.matmul(w2.T, gf).reshape(b, c, h, wd)
            if stride == 1:
                gx = gxs
            else:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gxs
            return gx, gw

        return out, vjp

    pad = k // 2
    xp = _pad_hw(x.data, pad)
    win = _windows(xp, k, stride)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def vjp(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gwin = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        gx = _scatter_windows(gwin, xp.shape, k, stride, pad)
        return gx, gw

    return np.ascontiguousarray(out), vjp


@_primitive("depthwise_conv2d")
def _depthwise_conv2d(inputs, attrs):
    x, w = inputs
    stride = int(attrs.get("stride", 1))
    _need(w.data.ndim == 3 and w.shape[1] == w.shape[2], "depthwise_conv2d", inputs, "weight must be [C,k,k]")
    k = w.shape[1]
    _check_conv("depthwise_conv2d", inputs, x, k, stride)
    _need(x.shape[1] == w.shape[0], "depthwise_conv2d", inputs, "channel mismatch")
    pad = k // 2
    xp = _pad_hw(x.data, pad)
    wd = np.ascontiguousarray(w.data)
    ho = (x.shape[2] - 1) // stride + 1
    wo = (x.shape[3] - 1) // stride + 1
    if _kernels.dw_forward is not None:
        out = _kernels.dw_forward(xp, wd, stride, ho, wo)
    else:  # pragma: no cover
        out = np.zeros((x.shape[0], x.shape[1], ho, wo))
        for di in range(k):
            for dj in range(k):
                out += xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] * wd[None, :, di, dj, None, None]

    def vjp(g):
        g = np.ascontiguousarray(g)
        if not w.requires_grad and _kernels.dw_backward_input is not None:
            gxp = _kernels.dw_backward_input(g, wd, stride, xp.shape[2], xp.shape[3])
            return gxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]], None
        if _kernels.dw_backward is not None:
            gxp, gw = _kernels.dw_backward(g, xp, wd, stride)
        else:  # pragma: no cover
            gw = np.empty_like(wd)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    sl = (slice(None), slice(None), slice(di, di + stride * ho, stride),
                          slice(dj, dj + stride * wo, stride))
                    gw[:, di, dj] = np.einsum("bchw,bchw->c", g, xp[sl])
                    gxp[sl] += g * wd[None, :, di, dj, None, None]
        gx = gxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]]
        return gx, gw

    return out, vjp


# -- elementwise and normalisation -----------------------------------------


@_primitive("relu6")
def _relu6(inputs, attrs):
    (x,) = inputs
    out = np.clip(x.data, 0.0, 6.0)
    mask = (x.data > 0.0) & (x.data < 6.0)

    def vjp(g):
        return (g * mask,)

    return out, vjp


@_primitive("batch_norm")
def _batch_norm(inputs, attrs):
    """Inputs: x, gamma, beta, running_mean, running_var.

    attrs: ``training`` (use batch statistics), ``update_stats`` (write the
    running statistics in place), ``momentum``, ``eps``.
    """
    x, gamma, beta, rmean, rvar = inputs
    _need(x.data.ndim in (2, 4), "batch_norm", inputs, "input must be [B,C] or [B,C,H,W]")
    c = x.shape[1]
    for t in (gamma, beta, rmean, rvar):
        _need(t.shape == (c,), "batch_norm", inputs, "per-channel vectors must be [C]")
    eps = float(attrs.get("eps", 1e-5))
    training = bool(attrs.get("training", True))
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)

    fused = training and _kernels.bn_train_forward is not None
    if fused:
        x3 = np.ascontiguousarray(x.data).reshape(x.shape[0], c, -1)
        out3, xhat3, mean, var, inv_std = _kernels.bn_train_forward(
            x3, gamma.data, beta.data, eps)
        m = x.data.size // c
        if attrs.get("update_stats", False):
            mom = float(attrs.get("momentum", 0.1))
            unbiased = var * (m / (m - 1)) if m > 1 else var
            rmean.data[...] = (1.0 - mom) * rmean.data + mom * mean
            rvar.data[...] = (1.0 - mom) * rvar.data + mom * unbiased

        def fused_vjp(g):
            g3 = np.ascontiguousarray(g).reshape(xhat3.shape)
            gx, ggamma, gbeta = _kernels.bn_train_backward(g3, xhat3, gamma.data, inv_std)
            return gx.reshape(x.shape), ggamma, gbeta, None, None

        return out3.reshape(x.shape), fused_vjp

    if training:
        m = x.data.size // c
        mean = x.data.mean(axis=axes)
        xc = x.data - mean.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std.reshape(bshape)
        if attrs.get("update_stats", False):
            mom = float(attrs.get("momentum", 0.1))
            unbiased = var * (m / (m - 1)) if m > 1 else var
            rmean.data[...] = (1.0 - mom) * rmean.data + mom * mean
            rvar.data[...] = (1.0 - mom) * rvar.data + mom * unbiased
    else:
        m = None
        inv_std = 1.0 / np.sqrt(rvar.data + eps)
        xhat = (x.data - rmean.data.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = gxhat.sum(axis=axes).reshape(bshape)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta, None, None

    return out, vjp


@_primitive("global_avg_pool")
def _gap(inputs, attrs):
    (x,) = inputs
    _need(x.data.ndim == 4, "global_avg_pool", inputs, "input must be NCHW")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return out, vjp


@_primitive("add")
def _add(inputs, attrs):
    a, b = inputs
    _need(a.shape == b.shape, "add", inputs, "operands must have equal shapes")

    def vjp(g):
        return g, g

    return a.data + b.data, vjp


@_primitive("scale")
def _scale(inputs, attrs):
    """x times a scalar tensor s (the gate value in a mixed layer)."""
    x, s = inputs
    _need(s.data.size == 1, "scale", inputs, "scale factor must hold one element")
    sv = float(s.data.reshape(-1)[0])

    def vjp(g):
        gs = np.array(np.vdot(g, x.data)).reshape(s.shape) if s.requires_grad else None
        return g * sv, gs

    return x.data * sv, vjp


@_primitive("flatten")
def _flatten(inputs, attrs):
    (x,) = inputs
    shape = x.shape

    def vjp(g):
        return (g.reshape(shape),)

    return x.data.reshape(shape[0], -1), vjp


@_primitive("sum")
def _sum(inputs, attrs):
    (x,) = inputs

    def vjp(g):
        return (np.full(x.shape, float(np.asarray(g).reshape(-1)[0])),)

    return np.array(x.data.sum()), vjp


@_primitive("cross_entropy")
def _cross_entropy(inputs, attrs):
    """Mean softmax cross-entropy of logits [B,K] against integer ``labels``."""
    (logits,) = inputs
    labels = np.asarray(attrs["labels"], dtype=np.int64)
    _need(logits.data.ndim == 2 and labels.shape == (logits.shape[0],), "cross_entropy", inputs,
          "logits must be [B,K] with B labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    b = logits.shape[0]
    rows = np.arange(b)
    loss = float((logsum - z[rows, labels]).mean())

    def vjp(g):
        probs = np.exp(z - logsum[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (float(np.asarray(g).reshape(-1)[0]) / b),)

    return np.array(max(loss, 0.0)), vjp


# -- convenience wrappers ---------------------------------------------------


def linear(x, w, b=None):
    return apply_primitive("linear", (x, w) if b is None else (x, w, b))


def conv2d(x, w, stride=1):
    return apply_primitive("conv2d", (x, w), {"stride": stride})


def depthwise_conv2d(x, w, stride=1):
    return apply_primitive("depthwise_conv2d", (x, w), {"stride": stride})


def relu6(x):
    return apply_primitive("relu6", (x,))


def batch_norm(x, gamma, beta, running_mean, running_var, training=True, update_stats=False,
               momentum=0.1, eps=1e-5):
    return apply_primitive(
        "batch_norm",
        (x, gamma, beta, running_mean, running_var),
        {"training": training, "update_stats": update_stats, "momentum": momentum, "eps": eps},
    )


def global_avg_pool(x):
    return apply_primitive("global_avg_pool", (x,))


def add(a, b):
    return apply_primitive("add", (a, b))


def scale(x, s):
    if not isinstance(s, Tensor):
        s = Tensor(np.array([float(s)]))
    return apply_primitive("scale", (x, s))


def flatten(x):
    return apply_primitive("flatten", (x,))


def tsum(x):
    return apply_primitive("sum", (x,))


def cross_entropy(logits, labels):
    return apply_primitive("cross_entropy", (logits,), {"labels": labels})
