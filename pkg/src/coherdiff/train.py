"""Plain-SGD training loop with a deterministic CSV metrics log."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from coherdiff import numcore as nc
from coherdiff.diffusion import denoise_loss, make_schedule
from coherdiff.errors import ParameterError, TrainingError
from coherdiff.model import Denoiser, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    caption_drop: float = 0.1
    ckpt_every: int = 1000
    data_n: int = 4096
    data_seed: int = 1234

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ParameterError(f"invalid training config {self}")
        if not 0 <= self.caption_drop < 1:
            raise ParameterError(f"caption_drop must lie in [0, 1), got {self.caption_drop}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown training config keys {sorted(unknown)}")
        return cls(**data)


class SceneBatches:
    """Stacks scenes into model-ready arrays; images are mapped to ``[-1, 1]``."""

    def __init__(self, scenes, dtype=np.float32):
        self.images = np.stack([s.image for s in scenes]).astype(dtype) * 2 - 1
        self.layouts = np.stack([s.layout for s in scenes])
        self.grounded = [list(s.grounded_ids) for s in scenes]
        self.captions = [list(s.caption_ids) for s in scenes]

    def __len__(self):
        return len(self.images)

    def take(self, idx):
        return (self.images[idx], self.layouts[idx],
                [self.grounded[i] for i in idx], [self.captions[i] for i in idx])


def metric_columns(model):
    return ["step", "loss", "tanh_alpha"] + [f"tanh_beta_{i}" for i in range(len(model.sfe_blocks()))]


def sgd_step(params, grads, lr):
    for name, p in params.items():
        p.data -= np.asarray(lr * grads[name], dtype=p.dtype)


def train(model: Denoiser, scenes, config: TrainConfig, out_dir, progress=None):
    """Run ``config.steps`` SGD steps; write ``metrics.csv`` and checkpoints into ``out_dir``.

    Returns the list of per-step losses. Raises :class:`TrainingError`
    (carrying the step index) on a non-finite loss.
    """
    os.makedirs(out_dir, exist_ok=True)
    sched = make_schedule(model.config.T, model.config.beta_start, model.config.beta_end)
    data = SceneBatches(scenes, model.dtype)
    params = model.parameters()
    rng = np.random.default_rng(config.seed)
    losses = []
    metrics_path = os.path.join(out_dir, "metrics.csv")
    started = time.perf_counter()
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metric_columns(model))
        for step in range(1, config.steps + 1):
            idx = rng.integers(0, len(data), config.batch_size)
            z0, layouts, grounded, captions = data.take(idx)
            t = rng.integers(0, sched.T, config.batch_size)
            eps = rng.standard_normal(z0.shape).astype(model.dtype)
            drop = rng.random(config.batch_size) < config.caption_drop
            captions = [[] if d else c for d, c in zip(drop, captions)]
            with nc.GradTape() as tape:
                tape.watch(params)
                loss = denoise_loss(model, z0, layouts, grounded, captions, t, eps, sched)
            value = float(loss.item())
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            sgd_step(params, tape.gradient(loss), config.lr)
            losses.append(value)
            alpha, betas = model.gates()
            writer.writerow([step, f"{value:.9g}", f"{alpha:.9g}"] + [f"{b:.9g}" for b in betas])
            if config.ckpt_every and step % config.ckpt_every == 0 and step != config.steps:
                save_checkpoint(model, os.path.join(out_dir, f"ckpt_{step:06d}.bin"), step)
            if progress is not None:
                progress(step, value)
    save_checkpoint(model, os.path.join(out_dir, "final.bin"), config.steps,
                    extra={"train": config.to_dict()})
    log.debug("trained %d steps in %.1fs", config.steps, time.perf_counter() - started)
    return losses
