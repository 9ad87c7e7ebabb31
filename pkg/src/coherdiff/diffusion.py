"""Pixel-space DDPM: schedule, forward noising, denoising objective and guided sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coherdiff import numcore as nc
from coherdiff.errors import ParameterError, SamplingError, TrainingError


@dataclass(frozen=True)
class Schedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def alpha_bar_prev(self, t):
        return self.alpha_bars[t - 1] if t > 0 else 1.0


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 2.0
    uncond_drop_prob: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ParameterError(f"guidance scale must be >= 0, got {self.scale}")
        if not 0 <= self.uncond_drop_prob < 1:
            raise ParameterError(f"drop probability must lie in [0, 1), got {self.uncond_drop_prob}")


def make_schedule(T=200, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with cumulative products in float64."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return Schedule(betas, alphas, np.cumprod(alphas))


def _check_steps(t, sched):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ParameterError(f"timestep out of range [0, {sched.T}): {t}")
    return t


def _per_item(values, ndim):
    """Broadcast per-batch scalars against ``ndim``-dimensional samples."""
    values = np.asarray(values)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample(z0, t, eps, sched):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` is a scalar step or one step per leading batch item.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ParameterError(f"noise shape {eps.shape} != sample shape {z0.shape}")
    t = _check_steps(t, sched)
    abar = _per_item(sched.alpha_bars[t], z0.ndim)
    return (np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps).astype(z0.dtype)


def denoise_loss(model, z0, s, y_g, y_e, t, eps, sched):
    """Mean squared error between ``eps`` and ``model(q_sample(z0, t, eps), t, s, y_g, y_e)``."""
    z_t = q_sample(z0, t, eps, sched)
    pred = model(z_t, t, s, y_g, y_e)
    if not np.all(np.isfinite(pred.data)):
        raise TrainingError("model produced a non-finite noise prediction")
    return nc.mse(pred, nc.Tensor(np.asarray(eps), dtype=pred.dtype))


def cfg_epsilon(eps_cond, eps_uncond, scale):
    """Classifier-free guidance: ``uncond + scale * (cond - uncond)``.

    Scale 0 and 1 return the respective branch unchanged.
    """
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if scale == 0:
        return eps_uncond.copy()
    if scale == 1:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def _predict(model, x, t, s, y_g, y_e):
    out = model(x, np.full(x.shape[0], t), s, y_g, y_e)
    return np.asarray(getattr(out, "data", out))


def guided_epsilon(model, x, t, s, y_g, y_e, scale, null_caption=()):
    """Noise estimate for step ``t`` with the caption dropped on the unconditional branch."""
    B = x.shape[0]
    null = [list(null_caption)] * B
    if scale == 0:
        return _predict(model, x, t, s, y_g, null)
    if scale == 1:
        return _predict(model, x, t, s, y_g, y_e)
    # two separate calls keep each branch bit-identical to its unguided run
    cond = _predict(model, x, t, s, y_g, y_e)
    uncond = _predict(model, x, t, s, y_g, null)
    return cfg_epsilon(cond, uncond, scale)


def sample_loop(model, s, y_g, y_e, sched, guidance=GuidanceConfig(), seed=0,
                shape=None, deterministic=False, clip=True, null_caption=(), callback=None):
    """Reverse diffusion from seeded Gaussian noise.

    ``model(x, t, s, y_g, y_e)`` predicts noise for a batch; ``s`` holds one
    layout per sample and ``y_g``/``y_e`` one token-id list per sample. The
    default is ancestral DDPM with the posterior variance; ``deterministic``
    uses the noise-free DDIM update instead. Predicted clean images are
    clipped to ``[-1, 1]`` unless ``clip`` is false.
    """
    s = np.asarray(s)
    rng = np.random.default_rng(seed)
    if shape is None:
        shape = (s.shape[0], 3) + s.shape[-2:]
    x = rng.standard_normal(shape)
    for t in reversed(range(sched.T)):
        eps = guided_epsilon(model, x, t, s, y_g, y_e, guidance.scale, null_caption)
        abar = sched.alpha_bars[t]
        abar_prev = sched.alpha_bar_prev(t)
        x0 = (x - np.sqrt(1 - abar) * eps) / np.sqrt(abar)
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
        if deterministic:
            eps_eff = (x - np.sqrt(abar) * x0) / np.sqrt(1 - abar)
            x = np.sqrt(abar_prev) * x0 + np.sqrt(1 - abar_prev) * eps_eff
        else:
            beta = sched.betas[t]
            mean = (np.sqrt(abar_prev) * beta / (1 - abar)) * x0 \
                + (np.sqrt(sched.alphas[t]) * (1 - abar_prev) / (1 - abar)) * x
            if t > 0:
                var = beta * (1 - abar_prev) / (1 - abar)
                mean = mean + np.sqrt(var) * rng.standard_normal(shape)
            x = mean
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at step {t}", step=t)
        if callback is not None:
            callback(t, x)
    return x
