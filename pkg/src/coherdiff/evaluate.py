"""Behavioural probes of a trained denoiser on fresh synthetic scenes.

Each probe draws its own scenes from a seed disjoint from training data,
samples or runs a forward pass, and returns a dict of plain floats and
lists so the result can be logged as JSON.
"""
import numpy as np

from coherdiff import numcore as nc
from coherdiff import synthdata as sd
from coherdiff.diffusion import GuidanceConfig, make_schedule, q_sample, sample_loop
from coherdiff.model import similarity_heat_maps

VARIANTS = ("touching/bright", "apart/bright", "touching/dark", "apart/dark")


def probe_scenes(model, n, seed, specs):
    """``n`` scenes at the model's resolution; ``specs[i % len(specs)]`` sets each scene's spec."""
    size = model.config.image_size
    gen_size = max(size, sd.MIN_SCENE_SIZE)
    scenes = []
    for i in range(n):
        spec = sd.SceneSpec.from_variant(specs[i % len(specs)], size=gen_size)
        scenes.append(sd.downsample_scene(sd.gen_scene(sd.derive_seed(seed, i), spec), size))
    return scenes


def _schedule(model):
    cfg = model.config
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def _to_images(x):
    return np.clip((np.asarray(x) + 1) / 2, 0, 1)


def layout_adherence(model, n=16, scale=2.0, seed=777, sample_seed=0):
    """Per-pixel palette-class agreement of guided samples with their layouts.

    ``class_match`` ignores brightness (nearest colour at any luminance);
    ``palette_match`` uses only the caption's own luminance.
    """
    scenes = probe_scenes(model, n, seed, VARIANTS)
    x = sample_loop(model, np.stack([s.layout for s in scenes]), [s.grounded_ids for s in scenes],
                    [s.caption_ids for s in scenes], _schedule(model), GuidanceConfig(scale), seed=sample_seed)
    class_match, palette_match = [], []
    for image, scene in zip(_to_images(x), scenes):
        class_match.append(sd.palette_agreement(image, scene.layout)[0])
        palette_match.append(sd.palette_agreement(image, scene.layout, scene.spec.attribute)[0])
    return {"class_match": float(np.mean(class_match)), "palette_match": float(np.mean(palette_match)),
            "per_sample": class_match}


def caption_control(model, n=20, scale=2.0, seed=888, sample_seed=0):
    """Fraction of same-seed, same-layout pairs where "bright" outshines "dark"."""
    bright = probe_scenes(model, n, seed, ("touching/bright", "apart/bright"))
    dark = probe_scenes(model, n, seed, ("touching/dark", "apart/dark"))
    layouts = np.stack([s.layout for s in bright])
    grounded = [s.grounded_ids for s in bright]
    sched = _schedule(model)
    lum = {}
    for name, scenes in (("bright", bright), ("dark", dark)):
        x = sample_loop(model, layouts, grounded, [s.caption_ids for s in scenes], sched,
                        GuidanceConfig(scale), seed=sample_seed)
        lum[name] = np.array([sd.luminance(im) for im in _to_images(x)])
    gaps = lum["bright"] - lum["dark"]
    return {"ordered": float(np.mean(gaps > 0)), "mean_gap": float(gaps.mean()), "gaps": gaps.tolist()}


def heat_band_contrast(model, n=20, step=None, width=2, seed=999, noise_seed=0):
    """How often the similarity heat is higher on the ball/paddle contact band than on background.

    Each scene is a "touching" scene noised to ``step`` (default ``T // 4``).
    The per-block heat maps are upsampled to the image grid and averaged
    before comparing the band mean with the mean over background pixels
    outside the band.
    """
    cfg = model.config
    step = cfg.T // 4 if step is None else step
    sched = _schedule(model)
    rng = np.random.default_rng(noise_seed)
    size = cfg.image_size
    contrasts = []
    for scene in probe_scenes(model, n, seed, ("touching/bright", "touching/dark")):
        z_t = q_sample(scene.image * 2 - 1, step, rng.standard_normal(scene.image.shape), sched)
        maps = similarity_heat_maps(model, z_t, step, scene.layout, scene.grounded_ids, scene.caption_ids)
        heat = np.mean([nc.resize_nearest(m, size, size) for m in maps], axis=0)
        band = sd.contact_band(scene.layout, width=width)
        background = (scene.layout == sd.BACKGROUND) & ~band
        if not band.any() or not background.any():
            # downsampling can erase the contact; such scenes count as losses
            contrasts.append(None)
            continue
        contrasts.append(float(heat[band].mean() - heat[background].mean()))
    valid = np.array([c for c in contrasts if c is not None])
    return {"band_wins": sum(c is not None and c > 0 for c in contrasts) / n,
            "mean_contrast": float(valid.mean()) if valid.size else float("nan"), "contrasts": contrasts}
