"""Differentiable forward ops on NCHW / N×F tensors.

Convolution is cross-correlation (no kernel flip). Every op checks its
output for NaN/Inf and raises ``NumericError``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError
from .tensor import Tensor, make_result

PROB_EPS = 1e-7


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_ndim(x: Tensor, ndim: int, op: str) -> None:
    if x.data.ndim != ndim:
        raise DimensionError(f"{op}: expected {ndim}-D input, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    x, kernel, bias = _t(x), _t(kernel), _t(bias)
    _require_ndim(x, 4, "conv2d")
    _require_ndim(kernel, 4, "conv2d")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} (padding {padding})")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # (N, C, Ho, Wo, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        gk = gx = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))  # N,Ho,Wo,C
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gk, gb

    return make_result(out, (x, kernel, bias), backward, "conv2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x, weight, bias = _t(x), _t(weight), _t(bias)
    _require_ndim(x, 2, "dense")
    _require_ndim(weight, 2, "dense")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: input features {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data

    def backward(g: np.ndarray):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "dense")


def pool_avg2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    x = _t(x)
    _require_ndim(x, 4, "pool_avg2d")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window < 1 or stride < 1 or window > h or window > w:
        raise DimensionError(f"pool_avg2d: window {window} invalid for spatial {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = windows.mean(axis=(4, 5))
    scale = 1.0 / (window * window)

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gs
        return (gx,)

    return make_result(out, (x,), backward, "pool_avg2d")


def pool_global_avg(x: Tensor) -> Tensor:
    x = _t(x)
    _require_ndim(x, 4, "pool_global_avg")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "pool_global_avg")


def flatten(x: Tensor) -> Tensor:
    x = _t(x)
    out = x.data.reshape(x.shape[0], -1)

    def backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "flatten")


def relu(x: Tensor) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g: np.ndarray):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _t(x)
    s = _stable_sigmoid(x.data)

    def backward(g: np.ndarray):
        return (g * s * (1 - s),)

    return make_result(s, (x,), backward, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    x = _t(x)
    _require_ndim(x, 2, "softmax")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rate) at train time, identity at eval."""
    x = _t(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise InputError("dropout: train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x.data * keep

    def backward(g: np.ndarray):
        return (g * keep,)

    return make_result(out, (x,), backward, "dropout")


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise DimensionError(f"residual_add: shapes differ {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray):
        return g, g

    return make_result(out, (a, b), backward, "residual_add")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [_t(x) for x in xs]
    if not xs:
        raise DimensionError("concat_channels: empty input list")
    for x in xs:
        _require_ndim(x, 4, "concat_channels")
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise DimensionError(f"concat_channels: N,H,W mismatch {xs[0].shape} vs {x.shape}")
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g: np.ndarray):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return make_result(out, tuple(xs), backward, "concat_channels")


def _check_labels_binary(label: np.ndarray) -> None:
    if not np.all((label == 0) | (label == 1)):
        raise InputError("bce: labels must be 0 or 1")


def bce(prob: Tensor, label) -> Tensor:
    """Mean binary cross-entropy of probabilities (N×1) against {0,1} labels."""
    prob = _t(prob)
    y = np.asarray(label, dtype=prob.dtype).reshape(prob.shape)
    _check_labels_binary(y)
    raw = prob.data
    p = np.clip(raw, PROB_EPS, 1 - PROB_EPS)
    n = raw.shape[0]
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    inside = (raw >= PROB_EPS) & (raw <= 1 - PROB_EPS)

    def backward(g: np.ndarray):
        dp = (-(y / p) + (1 - y) / (1 - p)) / n
        return (g * dp * inside,)

    return make_result(np.asarray(loss, dtype=prob.dtype), (prob,), backward, "bce")


def sparse_ce(prob: Tensor, label) -> Tensor:
    """Mean negative log-likelihood of softmax probabilities (N×K) at integer labels."""
    prob = _t(prob)
    _require_ndim(prob, 2, "sparse_ce")
    n, k = prob.shape
    idx = np.asarray(label).reshape(-1)
    if idx.shape[0] != n:
        raise InputError(f"sparse_ce: {idx.shape[0]} labels for {n} rows")
    if not np.issubdtype(idx.dtype, np.integer):
        if not np.all(idx == np.round(idx)):
            raise InputError("sparse_ce: labels must be integer class indices")
        idx = idx.astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= k):
        raise InputError(f"sparse_ce: label out of range [0, {k})")
    rows = np.arange(n)
    picked = prob.data[rows, idx]
    p = np.clip(picked, PROB_EPS, 1 - PROB_EPS)
    loss = -np.mean(np.log(p))
    inside = (picked >= PROB_EPS) & (picked <= 1 - PROB_EPS)

    def backward(g: np.ndarray):
        gp = np.zeros_like(prob.data)
        gp[rows, idx] = -(1.0 / p) / n * inside
        return (g * gp,)

    return make_result(np.asarray(loss, dtype=prob.dtype), (prob,), backward, "sparse_ce")
