"""Global semantics fusion: layout + caption supervision injected through a tanh gate."""
from __future__ import annotations

import numpy as np

from coherdiff import numcore as nc
from coherdiff.attn import Attention
from coherdiff.errors import DimensionError, ParameterError
from coherdiff.numcore import Linear, Module, parameter
from coherdiff.numcore.tensor import as_tensor


def _to_tokens(x):
    """``(B, C, H, W)`` feature map -> ``(B, H*W, C)`` token matrix."""
    B, C, H, W = x.shape
    return nc.reshape(x, (B, C, H * W)).swapaxes(-1, -2)


def _to_map(tokens, H, W):
    B, _, C = tokens.shape
    return nc.reshape(tokens.swapaxes(-1, -2), (B, C, H, W))


def sinusoidal_positions(n, dim, dtype=np.float32):
    """Fixed sine/cosine features for ``n`` positions, ``dim`` channels."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(dim) // 2 * 2) / max(dim, 1))
    angles = pos * freq[None, :]
    return np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles)).astype(dtype)


class GsfLayer(Module):
    def __init__(self, channels, context_dim, width, rng):
        self.self_attn = Attention(channels, width, rng)
        self.cross_attn = Attention(channels, width, rng, context_dim=context_dim)
        self.ff = parameter(np.eye(channels) + 0.1 * rng.standard_normal((channels, channels)))


class GsfParams(Module):
    """Input linear map, ``L`` attention layers and the injection gate ``alpha``."""

    def __init__(self, channels, context_dim, rng, layers=2, width=16, positional=False):
        if layers < 1:
            raise ParameterError("GSF needs at least one layer")
        self.positional = positional
        self.layout_proj = Linear(channels + 1, channels, rng)
        self.layers = [GsfLayer(channels, context_dim, width, rng) for _ in range(layers)]
        self.alpha = parameter(np.array(0.0))

    def forward(self, z_t, s, y_e):
        return gsf_forward(z_t, s, y_e, self)


def layout_project(z_t, s, params: GsfParams):
    """Concatenate the normalized layout channel to ``z_t`` and map ``C+1 -> C`` per pixel.

    ``s`` holds class ids already divided by the class count, shape
    ``(B, H, W)`` (or ``(H, W)`` for an unbatched ``z_t``).
    """
    z_t = as_tensor(z_t)
    s = as_tensor(np.asarray(getattr(s, "data", s)), z_t)
    unbatched = z_t.ndim == 3
    if unbatched:
        z_t = nc.reshape(z_t, (1,) + z_t.shape)
        s = nc.reshape(s, (1,) + s.shape)
    if s.shape != (z_t.shape[0],) + z_t.shape[2:]:
        raise DimensionError(f"layout {s.shape} does not match image {z_t.shape}")
    B, C, H, W = z_t.shape
    joined = nc.concat([z_t, nc.reshape(s, (B, 1, H, W))], axis=1)
    out = _to_map(params.layout_proj(_to_tokens(joined)), H, W)
    return nc.reshape(out, out.shape[1:]) if unbatched else out


def gsf_layer(o_prev, y_e, layer: GsfLayer, positions=None):
    """One self-attention + cross-attention layer followed by the feedforward map.

    There is no residual around the feedforward: ``O = F' W``.
    """
    B, C, H, W = o_prev.shape
    tokens = _to_tokens(o_prev)
    sa = layer.self_attn
    qk_in = tokens if positions is None else nc.add(tokens, positions)
    attended = nc.attention(sa.to_q(qk_in), sa.to_k(qk_in), sa.to_v(tokens))
    f = nc.add(sa.proj(attended), tokens)
    f_prime = nc.add(layer.cross_attn(f, y_e), f)
    return _to_map(nc.matmul(f_prime, layer.ff), H, W)


def gsf_forward(z_t, s, y_e, params: GsfParams):
    """``O_L``: layout projection followed by every GSF layer, shape of ``z_t``."""
    o = layout_project(z_t, s, params)
    unbatched = o.ndim == 3
    if unbatched:
        o = nc.reshape(o, (1,) + o.shape)
        y_e = nc.reshape(as_tensor(y_e), (1,) + tuple(as_tensor(y_e).shape))
    positions = None
    if params.positional:
        _, C, H, W = o.shape
        positions = nc.Tensor(sinusoidal_positions(H * W, C, o.dtype))
    for layer in params.layers:
        o = gsf_layer(o, y_e, layer, positions)
    return nc.reshape(o, o.shape[1:]) if unbatched else o


def gated_inject(z_t, o_L, alpha):
    """``z_t + tanh(alpha) * O_L``; returns ``z_t`` bit-for-bit while ``alpha == 0``."""
    alpha = alpha.alpha if isinstance(alpha, GsfParams) else alpha
    return nc.gate_add(z_t, o_L, alpha)
