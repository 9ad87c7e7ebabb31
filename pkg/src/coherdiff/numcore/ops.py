"""Differentiable primitives over :class:`Tensor`.

Each primitive computes its forward value with numpy and hands a closure
mapping the output gradient to one gradient per parent to
:func:`make_result`.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from coherdiff.errors import DimensionError, MaskingError
from coherdiff.numcore.tensor import Tensor, as_tensor, make_result


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_result(out, (a, b), backward)


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent
    return make_result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a):
    return make_result(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a):
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_result(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a):
    keep = a.data > 0
    return make_result(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,))


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return make_result(out, (a,), lambda g: (g * (sig * (1 + a.data * (1 - sig))),))


def gate_add(x, y, gate):
    """``x + tanh(gate) * y`` with a bitwise-exact identity when the gate is shut.

    ``gate`` is a scalar tensor. When ``tanh(gate) == 0`` the forward value
    is a copy of ``x`` (no ``+0.0`` rounding of negative zeros), while the
    gradient with respect to ``gate`` is still ``sum(g * y)``.
    """
    x, y = _pair(x, y)
    gate = as_tensor(gate, x)
    if x.shape != y.shape:
        raise DimensionError(f"gate_add operands differ: {x.shape} vs {y.shape}")
    w = np.tanh(gate.data).astype(x.dtype)
    out = x.data.copy() if not np.any(w) else x.data + w * y.data

    def backward(g):
        dgate = (1 - w * w) * np.sum(g * y.data)
        return g, g * w, np.reshape(dgate, gate.shape).astype(gate.dtype)

    return make_result(out, (x, y, gate), backward)


# -- reductions & shape ------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inverse),))


def getitem(a, index):
    out = a.data[index]
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, index, g)
        else:
            ga[index] += g
        return (ga,)

    return make_result(np.array(out, dtype=a.dtype), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tuple(tensors), backward)


def pad2d(a, pad):
    """Zero-pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, widths)
    return make_result(out, (a,), lambda g: (g[..., pad:-pad, pad:-pad],))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward)


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; ``mask`` (bool, broadcastable) marks allowed entries.

    Masked entries and ``-inf`` logits get exactly zero weight. A slice with
    no surviving entry raises :class:`MaskingError`.
    """
    x = as_tensor(x)
    logits = x.data
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    peak = np.max(logits, axis=axis, keepdims=True)
    if np.any(peak == -np.inf):
        raise MaskingError("softmax slice has no unmasked entry")
    out = np.exp(logits - peak)
    out /= np.sum(out, axis=axis, keepdims=True)

    def backward(g):
        r = g - np.sum(g * out, axis=axis, keepdims=True)
        r *= out
        return (r,)

    return make_result(out, (x,), backward)


def attention(q, k, v, mask=None, scale=None):
    """``softmax(q k^T * scale, masked) v`` as one primitive.

    Equivalent to composing :func:`matmul` and :func:`softmax`, but the
    logit/weight buffers are private, so forward and backward update them in
    place. Backward uses ``rowsum(dP * P) == rowsum(dO * O)``.
    """
    q, k = _pair(q, k)
    v = as_tensor(v, q)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    qs = q.data * np.asarray(scale, dtype=q.dtype)
    weights = np.matmul(qs, np.swapaxes(k.data, -1, -2))
    if mask is not None:
        blocked = ~np.broadcast_to(np.asarray(mask, dtype=bool), weights.shape)
        np.copyto(weights, -np.inf, where=blocked)
    peak = np.max(weights, axis=-1, keepdims=True)
    if np.any(peak == -np.inf):
        raise MaskingError("softmax slice has no unmasked entry")
    weights -= peak
    np.exp(weights, out=weights)
    weights /= np.sum(weights, axis=-1, keepdims=True)
    out = np.matmul(weights, v.data)

    def backward(g):
        dlogits = np.matmul(g, np.swapaxes(v.data, -1, -2))
        dlogits -= np.sum(g * out, axis=-1, keepdims=True)
        dlogits *= weights
        gq = np.matmul(dlogits, k.data) * np.asarray(scale, dtype=q.dtype)
        gk = np.matmul(np.swapaxes(dlogits, -1, -2), qs)
        gv = np.matmul(np.swapaxes(weights, -1, -2), g)
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)

    return make_result(out, (q, k, v), backward)


# -- convolution & resampling ------------------------------------------------

def _conv_padding(padding, kh, kw):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("'same' padding requires odd kernel extents")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    return int(padding), int(padding)


def _im2col(xn, kh, kw):
    """Channels-last ``(B, Hp, Wp, C)`` -> ``(B*Ho*Wo, kh*kw*C)`` patch matrix.

    Patch entries are ordered (row, col, channel) so each copy moves a
    contiguous channel run.
    """
    B, Hp, Wp, C = xn.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    windows = sliding_window_view(xn, (kh, kw), axis=(1, 2))
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C), Ho, Wo


def _channels_last_padded(x, ph, pw):
    B, C, H, W = x.shape
    out = np.zeros((B, H + 2 * ph, W + 2 * pw, C), dtype=x.dtype)
    out[:, ph:ph + H, pw:pw + W, :] = x.transpose(0, 2, 3, 1)
    return out


def conv2d(x, w, bias=None, padding="same"):
    """2-D cross-correlation via im2col.

    ``x`` is ``(Cin, H, W)`` or batched ``(B, Cin, H, W)``; ``w`` is
    ``(Cout, Cin, kh, kw)``; ``bias`` is ``(Cout,)`` or ``None``. The input
    gradient is itself a full correlation of the output gradient with the
    flipped kernel, so backward costs one more im2col + GEMM.
    """
    x = as_tensor(x)
    w = as_tensor(w, x)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (B,C,H,W) input and 4-D weight, got {x.shape}, {w.shape}")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    ph, pw = _conv_padding(padding, kh, kw)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    cols, Ho, Wo = _im2col(_channels_last_padded(x.data, ph, pw), kh, kw)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias, x)
        out += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gcols, _, _ = _im2col(_channels_last_padded(g, kh - 1, kw - 1), kh, kw)
        flipped = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
        gxp = (gcols @ flipped.T).reshape(B, Hp, Wp, cin)
        gx = np.ascontiguousarray(gxp[:, ph:ph + H, pw:pw + W, :].transpose(0, 3, 1, 2))
        grads = [gx, np.ascontiguousarray(gw)]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    result = make_result(out, tuple(parents), backward)
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


def avg_pool2d(x, factor=2):
    *lead, H, W = x.shape
    if H % factor or W % factor:
        raise DimensionError(f"avg_pool2d: {H}x{W} not divisible by {factor}")
    blocks = x.data.reshape(*lead, H // factor, factor, W // factor, factor)
    out = blocks.mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (g / (factor * factor),)

    return make_result(out.astype(x.dtype), (x,), backward)


def upsample_nearest2d(x, factor=2):
    *lead, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        return (g.reshape(*lead, H, factor, W, factor).sum(axis=(-3, -1)),)

    return make_result(out, (x,), backward)


# -- normalization & lookup ----------------------------------------------------

def group_norm(x, groups, weight, bias, eps=1e-5):
    """Group normalization over ``(B, C, ...)`` with per-channel affine."""
    B, C = x.shape[:2]
    if C % groups:
        raise DimensionError(f"group_norm: {C} channels not divisible into {groups} groups")
    weight = as_tensor(weight, x)
    bias = as_tensor(bias, x)
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    cshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * weight.data.reshape(cshape) + bias.data.reshape(cshape)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gw = np.sum(g * xhat, axis=reduce_axes)
        gb = np.sum(g, axis=reduce_axes)
        dxhat = (g * weight.data.reshape(cshape)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv_std / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xh * np.sum(dxhat * xh, axis=-1, keepdims=True))
        return gx.reshape(x.shape), gw, gb

    return make_result(out.astype(x.dtype), (x, weight, bias), backward)


def embedding(table, ids):
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return make_result(out, (table,), backward)


def mse(a, b):
    """Mean squared difference, the usual regression objective."""
    d = sub(a, b)
    return mean(square(d))
