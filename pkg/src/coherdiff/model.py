"""The toy noise predictor: GSF injection followed by a small U-Net with SFE slots."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from coherdiff import numcore as nc
from coherdiff.attn import RegionMask, SFEBlock, heat_map
from coherdiff.errors import CheckpointError, ParameterError, RectificationError, VocabularyError
from coherdiff.gsf import GsfParams, gated_inject, gsf_forward
from coherdiff.numcore import Conv2d, GroupNorm, Linear, Module, parameter
from coherdiff.synthdata import CLASSES, DEFAULT_VOCAB, NULL, PAD

SFE_SITES = ("down1", "mid", "up1")


@dataclass
class ModelConfig:
    """Every knob of the denoiser. Round-trips through JSON via ``to_dict``/``from_dict``."""

    image_size: int = 32
    channels: int = 3
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2)
    groups: int = 8
    time_dim: int = 64
    k: int = 3
    gsf_layers: int = 2
    gsf_width: int = 16
    gsf_positional: bool = False
    n_tokens: int = 8
    embed_dim: int = 32
    attn_dim: int = 32
    vocab_size: int = len(DEFAULT_VOCAB)
    num_classes: int = len(CLASSES)
    class_tokens: tuple = tuple(DEFAULT_VOCAB.class_tokens())
    pad_id: int = PAD
    null_id: int = NULL
    sfe_sites: tuple = SFE_SITES
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.class_tokens = tuple(self.class_tokens)
        self.sfe_sites = tuple(self.sfe_sites)
        if len(self.channel_mult) != 3:
            raise ParameterError("the toy U-Net has exactly two down levels (three channel multipliers)")
        if self.image_size % 4:
            raise ParameterError(f"image size {self.image_size} must be divisible by 4")
        if self.k < 1 or self.k % 2 == 0:
            raise ParameterError(f"k must be odd and positive, got {self.k}")
        if len(self.class_tokens) != self.num_classes:
            raise ParameterError("need one grounded token per class")
        unknown = set(self.sfe_sites) - set(SFE_SITES)
        if unknown:
            raise ParameterError(f"unknown SFE sites {sorted(unknown)}; choose from {SFE_SITES}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def depth(self):
        return len(self.channel_mult) - 1

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def debug(cls, **overrides):
        """8x8, narrow, 64-bit configuration used for gradient checks."""
        base = dict(image_size=8, base_channels=4, groups=2, time_dim=8, gsf_width=4,
                    embed_dim=6, attn_dim=4, n_tokens=8, T=20, dtype="float64")
        base.update(overrides)
        return cls(**base)


# -- token embeddings --------------------------------------------------------------

def pad_ids(ids, n_tokens, pad_id, null_id=None, vocab_size=None):
    ids = [int(i) for i in ids]
    if vocab_size is not None:
        bad = [i for i in ids if not 0 <= i < vocab_size]
        if bad:
            raise VocabularyError(f"token ids outside the vocabulary: {bad}")
    if not ids and null_id is not None:
        ids = [null_id]
    if len(ids) > n_tokens:
        raise ParameterError(f"{len(ids)} tokens exceed the {n_tokens} available slots")
    return ids + [pad_id] * (n_tokens - len(ids))


def embed_tokens(ids, table, n_tokens, pad_id=PAD, null_id=None):
    """Row lookup padded to ``n_tokens`` slots; an empty list maps to the null row when given."""
    table = nc.as_tensor(table)
    padded = pad_ids(ids, n_tokens, pad_id, null_id, vocab_size=table.shape[0])
    return nc.embedding(table, np.array(padded))


class TokenEmbeddings(Module):
    """Trainable vocabulary table standing in for a frozen text encoder."""

    def __init__(self, config: ModelConfig, rng):
        self.n_tokens = config.n_tokens
        self.pad_id = config.pad_id
        self.null_id = config.null_id
        self.table = parameter(rng.standard_normal((config.vocab_size, config.embed_dim)))

    def ids(self, batch, null=False):
        return np.array([pad_ids(ids, self.n_tokens, self.pad_id, self.null_id if null else None,
                                 self.table.shape[0]) for ids in batch], dtype=np.int64)

    def forward(self, ids):
        return nc.embedding(self.table, ids)


def build_region_mask(layout, grounded_ids, class_tokens, pad_id=PAD):
    """Pixel ``i`` may attend slot ``j`` iff slot ``j`` holds the token of pixel ``i``'s class.

    ``layout`` is ``(..., H, W)`` and ``grounded_ids`` ``(..., N_t)``; the
    result is ``(..., H*W, N_t)``.
    """
    layout = np.asarray(layout)
    grounded_ids = np.asarray(grounded_ids)
    tokens = np.asarray(class_tokens)[layout].reshape(layout.shape[:-2] + (-1,))
    allowed = (grounded_ids[..., None, :] == tokens[..., :, None]) & (grounded_ids != pad_id)[..., None, :]
    missing = ~allowed.any(axis=-1)
    if missing.any():
        classes = sorted(set(layout.reshape(layout.shape[:-2] + (-1,))[missing].tolist()))
        raise RectificationError(f"layout classes {classes} have no grounded-text token")
    return RegionMask(allowed)


# -- U-Net ----------------------------------------------------------------------

def timestep_embedding(t, dim, dtype=np.float32):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freq = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freq[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class ResBlock(Module):
    def __init__(self, cin, cout, time_dim, groups, rng):
        self.norm1 = GroupNorm(min(groups, cin), cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.temb = Linear(time_dim, cout, rng)
        self.norm2 = GroupNorm(min(groups, cout), cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, scale=0.5)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(nc.silu(self.norm1(x)))
        B, C = h.shape[:2]
        h = nc.add(h, nc.reshape(self.temb(temb), (B, C, 1, 1)))
        h = self.conv2(nc.silu(self.norm2(h)))
        return nc.add(h, x if self.skip is None else self.skip(x))


class Denoiser(Module):
    """``eps_theta(z_t, t, S, y_g, y_e)``.

    Flow: GSF fuses the layout and caption, its output is added to ``z_t``
    through the ``alpha`` gate, then a two-level U-Net runs with an SFE
    block (RCA over grounded text + SCA) at each configured site.
    """

    def __init__(self, config: ModelConfig | None = None):
        config = ModelConfig() if config is None else config
        self.config = config
        rng = np.random.default_rng(config.seed)
        c0, c1, c2 = (config.base_channels * m for m in config.channel_mult)
        g, td = config.groups, config.time_dim
        with nc.precision(np.dtype(config.dtype)):
            self.embed = TokenEmbeddings(config, rng)
            self.gsf = GsfParams(config.channels, config.embed_dim, rng, layers=config.gsf_layers,
                                 width=config.gsf_width, positional=config.gsf_positional)
            self.time1 = Linear(td, td, rng)
            self.time2 = Linear(td, td, rng)
            self.conv_in = Conv2d(config.channels, c0, 3, rng)
            self.res0 = ResBlock(c0, c0, td, g, rng)
            self.res1 = ResBlock(c0, c1, td, g, rng)
            self.res2 = ResBlock(c1, c2, td, g, rng)
            self.res3 = ResBlock(c2 + c1, c1, td, g, rng)
            self.res4 = ResBlock(c1 + c0, c0, td, g, rng)
            sfe_args = dict(context_dim=config.embed_dim, n_tokens=config.n_tokens, rng=rng,
                            attn_dim=config.attn_dim, k=config.k, groups=g)
            self.sfe_down1 = SFEBlock(c1, **sfe_args) if "down1" in config.sfe_sites else None
            self.sfe_mid = SFEBlock(c2, **sfe_args) if "mid" in config.sfe_sites else None
            self.sfe_up1 = SFEBlock(c1, **sfe_args) if "up1" in config.sfe_sites else None
            self.norm_out = GroupNorm(min(g, c0), c0)
            self.conv_out = Conv2d(c0, config.channels, 3, rng, scale=0.0)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def sfe_blocks(self):
        return [b for b in (self.sfe_down1, self.sfe_mid, self.sfe_up1) if b is not None]

    def gates(self):
        """Current ``tanh(alpha)`` and ``tanh(beta)`` per SFE block."""
        return float(np.tanh(self.gsf.alpha.data)), [b.gate.weight for b in self.sfe_blocks()]

    def _sfe(self, block, h, context, layouts, grounded_ids, capture):
        if block is None:
            return h
        size = h.shape[-1]
        mask = build_region_mask(nc.resize_nearest(layouts, size, size), grounded_ids,
                                 self.config.class_tokens, self.config.pad_id)
        return block(h, context, mask, capture)

    def forward(self, z_t, t, layouts, grounded, captions, capture=None):
        cfg = self.config
        z_t = nc.Tensor(np.asarray(getattr(z_t, "data", z_t)), dtype=self.dtype)
        B = z_t.shape[0]
        size = cfg.image_size
        if z_t.shape[1:] != (cfg.channels, size, size):
            raise ParameterError(f"input {z_t.shape} does not match configured image {cfg.channels}x{size}x{size}")
        layouts = np.asarray(layouts)
        if layouts.shape[-2:] != (size, size):
            layouts = nc.resize_nearest(layouts, size, size)
        if layouts.shape != (B, size, size):
            raise ParameterError(f"need one {size}x{size} layout per sample, got {layouts.shape}")
        t = np.broadcast_to(np.asarray(t), (B,))
        if np.any(t < 0) or np.any(t >= cfg.T):
            raise ParameterError(f"timestep outside [0, {cfg.T})")
        if len(grounded) != B or len(captions) != B:
            raise ParameterError("need one grounded list and one caption per sample")

        grounded_ids = self.embed.ids(grounded)
        y_g = self.embed(grounded_ids)
        y_e = self.embed(self.embed.ids(captions, null=True))

        s = (layouts / cfg.num_classes).astype(self.dtype)
        o_L = gsf_forward(z_t, s, y_e, self.gsf)
        x = gated_inject(z_t, o_L, self.gsf.alpha)

        temb = nc.Tensor(timestep_embedding(t, cfg.time_dim, self.dtype))
        temb = self.time2(nc.silu(self.time1(temb)))

        h0 = self.res0(self.conv_in(x), temb)
        h1 = self.res1(nc.avg_pool2d(h0), temb)
        h1 = self._sfe(self.sfe_down1, h1, y_g, layouts, grounded_ids, capture)
        h2 = self.res2(nc.avg_pool2d(h1), temb)
        h2 = self._sfe(self.sfe_mid, h2, y_g, layouts, grounded_ids, capture)
        u1 = self.res3(nc.concat([nc.upsample_nearest2d(h2), h1], axis=1), temb)
        u1 = self._sfe(self.sfe_up1, u1, y_g, layouts, grounded_ids, capture)
        u0 = self.res4(nc.concat([nc.upsample_nearest2d(u1), h0], axis=1), temb)
        return self.conv_out(nc.silu(self.norm_out(u0)))


def predict_eps(model, z_t, t, s, y_g, y_e, capture=None):
    return model(z_t, t, s, y_g, y_e, capture=capture)


def similarity_heat_maps(model, z_t, t, layout, grounded, caption):
    """One normalized heat map per SFE block from a single forward pass.

    ``z_t`` is one noisy ``C x H x W`` image; the maps have each block's
    own resolution, in block order (down, mid, up).
    """
    captured = []
    model(np.asarray(z_t)[None], np.array([t]), np.asarray(layout)[None], [list(grounded)],
          [list(caption)], capture=captured)
    return [heat_map(c.m)[0] for c in captured]


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    config: ModelConfig
    step: int = 0
    extra: dict = field(default_factory=dict)

    def build(self):
        model = Denoiser(self.config)
        try:
            model.load_state_dict(self.params)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint does not fit its config: {exc}") from None
        return model


def save_checkpoint(model: Denoiser, path, step=0, extra=None):
    meta = {"config": model.config.to_dict(), "step": int(step), "extra": extra or {}}
    nc.save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = nc.load_tensors(path)
    if not isinstance(meta, dict) or "config" not in meta:
        raise CheckpointError(f"{path}: missing config metadata")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (ParameterError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config metadata: {exc}") from None
    return Checkpoint(tensors, config, int(meta.get("step", 0)), meta.get("extra", {}))


def load_config(path) -> ModelConfig:
    with open(path) as fh:
        data = json.load(fh)
    return ModelConfig.from_dict(data.get("model", data))
