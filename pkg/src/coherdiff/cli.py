"""Command-line entry point: ``coherdiff {gen-data,train,sample,viz-ss,verify}``.

Exit codes: 0 success, 1 verification or contract failure, 2 usage or
invalid input, 3 I/O failure, 4 numerical divergence during training or
sampling. ``COHERDIFF_OUT`` sets the default output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from coherdiff import __version__
from coherdiff import synthdata as sd
from coherdiff.diffusion import GuidanceConfig, make_schedule, q_sample, sample_loop
from coherdiff.errors import (CoherDiffError, DatasetError, DimensionError, ParameterError,
                              SamplingError, TrainingError, VocabularyError)
from coherdiff.model import Denoiser, ModelConfig, load_checkpoint, save_checkpoint, similarity_heat_maps
from coherdiff.train import TrainConfig, train
from coherdiff.verify import SUITES, run_suite

log = logging.getLogger("coherdiff")

OUT_ENV = "COHERDIFF_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4


def default_out(*parts):
    return os.path.join(os.environ.get(OUT_ENV, "runs"), *parts)


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True)


def _log_resolved(command, config):
    log.info("%s resolved config: %s", command, _dump_json(config))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def parse_mix(text):
    """``"touching/bright=1,apart/dark=3"`` -> ``{"touching/bright": 1.0, "apart/dark": 3.0}``."""
    mix = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        name, _, weight = item.partition("=")
        sd.SceneSpec.from_variant(name)
        try:
            mix[name] = float(weight) if weight else 1.0
        except ValueError:
            raise ParameterError(f"bad mix weight in {item!r}") from None
    if not mix:
        raise ParameterError("empty mix")
    return mix


def _words(text):
    return text.replace(",", " ").split()


def load_layout(path):
    """A ``layout.pgm`` file or a scene directory; returns ``(layout, tokens or None, image or None)``."""
    if os.path.isdir(path):
        layout = sd.read_pgm(os.path.join(path, "layout.pgm"))
        tokens_path = os.path.join(path, "tokens.json")
        tokens = None
        if os.path.exists(tokens_path):
            with open(tokens_path) as fh:
                tokens = json.load(fh)
        image_path = os.path.join(path, "image.png")
        image = sd.read_png(image_path) if os.path.exists(image_path) else None
        return layout, tokens, image
    return sd.read_pgm(path), None, None


def _conditioning(args, layout, tokens, config):
    """Resolve grounded ids, caption ids and the scoring attribute from flags and scene tokens."""
    vocab = sd.DEFAULT_VOCAB
    if layout.shape != (config.image_size, config.image_size):
        raise ParameterError(f"layout is {layout.shape[0]}x{layout.shape[1]} but the checkpoint "
                             f"expects {config.image_size}x{config.image_size}")
    if args.text is not None:
        grounded = vocab.encode(_words(args.text))
    elif tokens is not None:
        grounded = list(tokens["grounded_ids"])
    else:
        grounded = vocab.encode([sd.CLASSES[c] for c in np.unique(layout)])
    if args.caption is not None:
        caption = vocab.encode(_words(args.caption))
    elif tokens is not None:
        caption = list(tokens["caption_ids"])
    else:
        caption = []
    words = vocab.decode(caption)
    attribute = getattr(args, "attribute", None) or next((w for w in words if w in sd.LUMINANCE), "bright")
    return grounded, caption, attribute


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args):
    out = args.out or default_out("data")
    mix = parse_mix(args.mix) if args.mix else dict(sd.DEFAULT_MIX)
    _log_resolved("gen-data", {"seed": args.seed, "n": args.n, "mix": mix, "size": args.size, "out": out})
    names = sd.dump_dataset(sd.dataset_stream(args.seed, args.n, mix, size=args.size), out)
    print(f"wrote {len(names)} scenes to {out}")
    return EXIT_OK


def _resolve_train_config(args):
    model_cfg = ModelConfig.debug() if args.preset == "debug" else ModelConfig()
    train_cfg = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), **data.get("model", {})})
        train_cfg.update(data.get("train", {}))
    flags = {"steps": args.steps, "lr": args.lr, "batch_size": args.batch_size, "seed": args.seed,
             "ckpt_every": args.ckpt_every, "data_n": args.data_n}
    train_cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": args.seed})
    return model_cfg, TrainConfig.from_dict(train_cfg)


def cmd_train(args):
    model_cfg, train_cfg = _resolve_train_config(args)
    out = args.out or default_out("train")
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": args.data, "out": out}
    _log_resolved("train", resolved)
    log.info("seed %d", train_cfg.seed)
    if args.data:
        scenes = sd.load_dataset(args.data)
        if not scenes:
            raise DatasetError(f"{args.data}: empty dataset")
    else:
        size = max(model_cfg.image_size, sd.MIN_SCENE_SIZE)
        scenes = list(sd.dataset_stream(train_cfg.data_seed, train_cfg.data_n, size=size))
    scenes = [sd.downsample_scene(s, model_cfg.image_size) for s in scenes]
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "run.json"), resolved)
    model = Denoiser(model_cfg)

    def progress(step, loss):
        if step % args.log_every == 0:
            log.info("step %d loss %.6f", step, loss)

    try:
        train(model, scenes, train_cfg, out, progress=progress)
    except TrainingError as exc:
        # the partial model is kept for inspection
        save_checkpoint(model, os.path.join(out, "diverged.bin"), exc.step)
        raise
    alpha, betas = model.gates()
    print(_dump_json({"checkpoint": os.path.join(out, "final.bin"), "tanh_alpha": alpha, "tanh_beta": betas}))
    return EXIT_OK


def cmd_sample(args):
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build()
    config = model.config
    layout, tokens, _ = load_layout(args.layout)
    grounded, caption, attribute = _conditioning(args, layout, tokens, config)
    out = args.out or default_out("sample.png")
    resolved = {"ckpt": args.ckpt, "layout": args.layout, "grounded": grounded, "caption": caption,
                "scale": args.scale, "seed": args.seed, "count": args.count,
                "deterministic": args.deterministic, "attribute": attribute, "out": out}
    _log_resolved("sample", resolved)
    sched = make_schedule(config.T, config.beta_start, config.beta_end)
    guidance = GuidanceConfig(scale=args.scale)
    root, ext = os.path.splitext(out)
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        path = out if args.count == 1 else f"{root}_{i:03d}{ext or '.png'}"
        x = sample_loop(model, layout[None], [grounded], [caption], sched, guidance, seed=seed,
                        deterministic=args.deterministic)
        image = np.clip((x[0] + 1) / 2, 0, 1)
        sd.write_png(path, image)
        written = sd.read_png(path)
        overall, per_class = sd.palette_agreement(written, layout, attribute)
        class_only, _ = sd.palette_agreement(written, layout)
        print(_dump_json({"path": path, "seed": seed, "palette_match": round(overall, 6),
                          "class_match": round(class_only, 6),
                          "regions": {k: round(v, 6) for k, v in per_class.items()}}))
    return EXIT_OK


def cmd_viz_ss(args):
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build()
    config = model.config
    layout, tokens, image = load_layout(args.layout)
    if args.image:
        image = sd.read_png(args.image)
    grounded, caption, _ = _conditioning(args, layout, tokens, config)
    out = args.out or default_out("heatmaps")
    step = config.T // 4 if args.step is None else args.step
    _log_resolved("viz-ss", {"ckpt": args.ckpt, "layout": args.layout, "grounded": grounded,
                             "caption": caption, "step": step, "seed": args.seed,
                             "image": args.image, "out": out})
    sched = make_schedule(config.T, config.beta_start, config.beta_end)
    if not 0 <= step < sched.T:
        raise ParameterError(f"--step must lie in [0, {sched.T})")
    z0 = np.zeros((config.channels, config.image_size, config.image_size)) if image is None else image * 2 - 1
    eps = np.random.default_rng(args.seed).standard_normal(z0.shape)
    z_t = q_sample(z0, step, eps, sched)
    maps = similarity_heat_maps(model, z_t, step, layout, grounded, caption)
    os.makedirs(out, exist_ok=True)
    alpha, betas = model.gates()
    sites = [s for s in ("down1", "mid", "up1") if s in config.sfe_sites]
    report = {"tanh_alpha": alpha, "blocks": []}
    for i, (site, heat, beta) in enumerate(zip(sites, maps, betas)):
        path = os.path.join(out, f"ss_{i}_{site}.png")
        sd.write_gray_png(path, heat)
        report["blocks"].append({"site": site, "path": path, "size": list(heat.shape), "tanh_beta": beta})
    print(_dump_json(report))
    return EXIT_OK


def cmd_verify(args):
    _log_resolved("verify", {"suite": args.suite, "seed": args.seed})

    def progress(res):
        log.info("%-11s %-34s %s (max error %.3g)", res.suite, res.name, "pass" if res.passed else "FAIL",
                 res.max_error)

    report = run_suite(args.suite, seed=args.seed, progress=progress)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK if report["passed"] else EXIT_FAIL


# -- parser ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="coherdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64, help="number of scenes (default 64)")
    p.add_argument("--out", help=f"dataset directory (default ${OUT_ENV}/data)")
    p.add_argument("--mix", help="variant weights, e.g. 'touching/bright=1,apart/dark=1' (default: even 4-way)")
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy denoiser with plain SGD")
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--data", help="dataset directory from gen-data (default: generated in memory)")
    p.add_argument("--steps", type=int, help="SGD steps (default 5000)")
    p.add_argument("--out", help=f"run directory (default ${OUT_ENV}/train)")
    p.add_argument("--seed", type=int, help="model init and batch-order seed (default 0)")
    p.add_argument("--lr", type=float, help="fixed step size (default 1e-3)")
    p.add_argument("--batch-size", type=int, help="default 4")
    p.add_argument("--ckpt-every", type=int, help="checkpoint period in steps (default 1000, 0 disables)")
    p.add_argument("--data-n", type=int, help="scenes generated when --data is absent (default 4096)")
    p.add_argument("--preset", choices=("default", "debug"), default="default",
                   help="model size preset; 'debug' is the 8x8 64-bit model")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("sample", cmd_sample, "sample images for a layout"),
                                  ("viz-ss", cmd_viz_ss, "write self-similarity heat maps")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--layout", required=True, help="layout PGM or a scene directory")
        p.add_argument("--text", help="grounded words (default: scene tokens or the layout's classes)")
        p.add_argument("--caption", help="caption words; '' selects the null caption")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        p.set_defaults(func=func)
        if name == "sample":
            p.add_argument("--scale", type=float, default=2.0, help="guidance scale (default 2)")
            p.add_argument("--count", type=int, default=1, help="samples at seeds seed..seed+count-1")
            p.add_argument("--deterministic", action="store_true", help="noise-free DDIM updates")
            p.add_argument("--attribute", choices=sorted(sd.LUMINANCE),
                           help="palette used for scoring (default: from the caption)")
        else:
            p.add_argument("--step", type=int, help="diffusion step of the forward pass (default T/4, 50 at T=200)")
            p.add_argument("--image", help="PNG noised to --step (default: the scene image, else zeros)")

    p = sub.add_parser("verify", help="run invariant suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (TrainingError, SamplingError) as exc:
        log.error("diverged at step %s: %s", exc.step, exc)
        return EXIT_DIVERGED
    except (ParameterError, VocabularyError, DimensionError, json.JSONDecodeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_USAGE
    except (OSError, DatasetError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except CoherDiffError as exc:
        log.error("contract violation: %s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
