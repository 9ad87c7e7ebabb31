"""Scaled-dot, rectified and self-similarity attention plus the gated SFE fusion.

Token matrices are stored tokens-major (``N x C``); every function accepts
optional leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coherdiff import numcore as nc
from coherdiff.errors import DimensionError, ParameterError, RectificationError
from coherdiff.numcore import Conv2d, GroupNorm, Linear, Module
from coherdiff.numcore.tensor import as_tensor, make_result


@dataclass
class RegionMask:
    """Boolean ``N_x x N_t`` matrix: may pixel ``i`` attend token ``j``."""

    allowed: np.ndarray

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        empty = ~self.allowed.any(axis=-1)
        if empty.any():
            rows = np.argwhere(empty)[:5].tolist()
            raise RectificationError(f"region mask rows without an allowed token, e.g. {rows}")


@dataclass
class SimilarityMaps:
    ss: np.ndarray
    m: np.ndarray
    k: int

    @property
    def half_window(self):
        return (self.k - 1) // 2


class FusionGate(Module):
    """Scalar ``beta``; the SCA branch is weighted by ``tanh(beta)``."""

    def __init__(self, value=0.0):
        self.beta = nc.parameter(np.array(value))

    @property
    def weight(self):
        return float(np.tanh(self.beta.data))


class Attention(Module):
    """Query/key/value projections and an output projection (single head)."""

    def __init__(self, query_dim, dim, rng, context_dim=None, out_dim=None):
        context_dim = query_dim if context_dim is None else context_dim
        out_dim = query_dim if out_dim is None else out_dim
        self.dim = dim
        self.to_q = Linear(query_dim, dim, rng, bias=False)
        self.to_k = Linear(context_dim, dim, rng, bias=False)
        self.to_v = Linear(context_dim, dim, rng, bias=False)
        self.proj = Linear(dim, out_dim, rng)

    def forward(self, x, context=None):
        context = x if context is None else context
        return scaled_attention(self.to_q(x), self.to_k(context), self.to_v(context), self.proj)


def _check_qkv(q, k, v):
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] == 0:
        raise ParameterError("attention over an empty context")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")


def _project(x, proj):
    return x if proj is None else proj(x)


def _allowed(mask):
    return mask.allowed if isinstance(mask, RegionMask) else RegionMask(mask).allowed


def scaled_attention(q, k, v, proj=None):
    """``proj(softmax(q k^T / sqrt(C)) v)``."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    return _project(nc.attention(q, k, v), proj)


def rectified_attention(q, k, v, mask, proj=None):
    """Cross-attention whose disallowed (pixel, token) logits are set to ``-inf``.

    Disallowed tokens receive exactly zero weight and the remaining weights
    are renormalized over the allowed ones.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    allowed = _allowed(mask)
    logits_shape = np.broadcast_shapes(q.shape[:-1], k.shape[:-2] + (1,)) + (k.shape[-2],)
    if np.broadcast_shapes(allowed.shape, logits_shape) != logits_shape:
        raise DimensionError(f"mask {allowed.shape} does not fit logits {logits_shape}")
    return _project(nc.attention(q, k, v, mask=allowed), proj)


def attention_weights(q, k, mask=None):
    """The (optionally rectified) attention matrix, for inspection."""
    q, k = as_tensor(q), as_tensor(k)
    logits = nc.matmul(nc.mul(q, 1.0 / np.sqrt(q.shape[-1])), k.swapaxes(-1, -2))
    return nc.softmax(logits, axis=-1, mask=None if mask is None else _allowed(mask)).data


def self_similarity_map(q_r, k):
    """Channel-summed products of each pixel with its zero-padded ``k x k`` neighbours.

    ``q_r`` is ``(..., C, H, W)``; the result is ``(..., k*k, H, W)`` with
    neighbours enumerated row-major over the window.
    """
    q = as_tensor(q_r)
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ParameterError(f"window length must be an odd positive integer, got {k}")
    H, W = q.shape[-2:]
    if k > 2 * min(H, W) + 1:
        raise ParameterError(f"window {k} too large for a {H}x{W} map")
    half = (k - 1) // 2
    widths = [(0, 0)] * (q.ndim - 2) + [(half, half), (half, half)]
    padded = np.pad(q.data, widths)
    offsets = [(di, dj) for di in range(k) for dj in range(k)]
    out = np.stack([np.sum(q.data * padded[..., di:di + H, dj:dj + W], axis=-3)
                    for di, dj in offsets], axis=-3)

    def backward(g):
        gq = np.zeros_like(q.data)
        gpad = np.zeros_like(padded)
        for t, (di, dj) in enumerate(offsets):
            gt = np.expand_dims(g[..., t, :, :], -3)
            gq += gt * padded[..., di:di + H, dj:dj + W]
            gpad[..., di:di + H, dj:dj + W] += gt * q.data
        gq += gpad[..., half:half + H, half:half + W]
        return (gq,)

    return make_result(out, (q,), backward)


class ConvExpand(Module):
    """Two 'same' 3x3 convolutions lifting ``k^2`` similarity channels to ``N_t``."""

    def __init__(self, in_channels, n_tokens, rng, hidden=None, kernel=3):
        hidden = max(in_channels, n_tokens) if hidden is None else hidden
        self.conv1 = Conv2d(in_channels, hidden, kernel, rng)
        self.conv2 = Conv2d(hidden, n_tokens, kernel, rng)

    def forward(self, ss):
        return expand_similarity(ss, self)


def expand_similarity(ss, params: ConvExpand):
    """``ReLU(conv2(ReLU(conv1(ss))))`` with spatial size preserved."""
    hidden = nc.relu(nc.conv2d(ss, params.conv1.weight, params.conv1.bias, padding="same"))
    return nc.relu(nc.conv2d(hidden, params.conv2.weight, params.conv2.bias, padding="same"))


def sca_attend(m, v, proj=None):
    """Per-pixel softmax over the ``N_t`` similarity channels, weighting token values.

    ``m`` is ``(..., N_t, H, W)``, ``v`` is ``(..., N_t, C)``; the result is
    ``(..., H*W, C_x)``.
    """
    m, v = as_tensor(m), as_tensor(v)
    nt, H, W = m.shape[-3:]
    if v.shape[-2] != nt:
        raise DimensionError(f"{nt} similarity channels but {v.shape[-2]} value rows")
    logits = nc.reshape(m, m.shape[:-2] + (H * W,)).swapaxes(-1, -2)
    weights = nc.softmax(logits, axis=-1)
    return _project(nc.matmul(weights, v), proj)


def sfe_fuse(i_rca, i_sca, gate):
    """``i_rca + tanh(beta) * i_sca``; exactly ``i_rca`` while ``beta == 0``."""
    beta = gate.beta if isinstance(gate, FusionGate) else gate
    return nc.gate_add(i_rca, i_sca, beta)


class SFEBlock(Module):
    """Residual feature-enhancement block replacing a U-Net cross-attention slot.

    RCA and SCA share the query/key/value projections and the output
    projection; each block owns its own similarity expansion and gate.
    """

    def __init__(self, channels, context_dim, n_tokens, rng, attn_dim=32, k=3, groups=8):
        self.k = k
        self.norm = GroupNorm(min(groups, channels), channels)
        self.attn = Attention(channels, attn_dim, rng, context_dim=context_dim, out_dim=channels)
        self.expand = ConvExpand(k * k, n_tokens, rng)
        self.gate = FusionGate()

    def forward(self, x, context, mask, capture=None):
        x = as_tensor(x)
        B, C, H, W = x.shape
        tokens = nc.reshape(self.norm(x), (B, C, H * W)).swapaxes(-1, -2)
        q = self.attn.to_q(tokens)
        key = self.attn.to_k(context)
        value = self.attn.to_v(context)
        i_rca = rectified_attention(q, key, value, mask, self.attn.proj)
        q_r = nc.reshape(q.swapaxes(-1, -2), (B, q.shape[-1], H, W))
        ss = self_similarity_map(q_r, self.k)
        m = expand_similarity(ss, self.expand)
        if capture is not None:
            capture.append(SimilarityMaps(ss.data, m.data, self.k))
        i_sca = sca_attend(m, value, self.attn.proj)
        fused = sfe_fuse(i_rca, i_sca, self.gate)
        return nc.add(x, nc.reshape(fused.swapaxes(-1, -2), (B, C, H, W)))


def heat_map(m):
    """Channel-averaged similarity map, min-max normalized to ``[0, 1]``.

    A constant map normalizes to all zeros.
    """
    avg = np.asarray(getattr(m, "data", m), dtype=np.float64).mean(axis=-3)
    lo = avg.min(axis=(-2, -1), keepdims=True)
    hi = avg.max(axis=(-2, -1), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (avg - lo) / span

