"""Seeded invariant suites: oracle agreement, gradient checks and properties.

Each property runs a fixed number of cases. Case ``i`` draws from
``default_rng(case_seed(seed, i))`` so a failure is reproducible from the
seed recorded in the report.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from coherdiff import numcore as nc
from coherdiff import oracle
from coherdiff.attn import (ConvExpand, SFEBlock, attention_weights, expand_similarity,
                            rectified_attention, sca_attend, scaled_attention, self_similarity_map)
from coherdiff.diffusion import GuidanceConfig, cfg_epsilon, denoise_loss, make_schedule, q_sample, sample_loop
from coherdiff.gsf import GsfParams, gated_inject, gsf_forward
from coherdiff.model import Denoiser, ModelConfig, build_region_mask
from coherdiff.synthdata import (DEFAULT_VOCAB, LUMINANCE, NOISE_SIGMA, PALETTE, SceneSpec, downsample_scene,
                                 gen_scene)

SUITES = ("oracles", "grads", "properties")


def case_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


@dataclass
class Check:
    suite: str
    name: str
    cases: int
    tolerance: float
    run: object  # run(rng) -> error measure, compared against tolerance


@dataclass
class PropertyResult:
    suite: str
    name: str
    cases: int
    tolerance: float
    max_error: float = 0.0
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return not self.failures

    def to_dict(self):
        out = asdict(self)
        out["passed"] = self.passed
        return out


def run_check(check: Check, seed=0, max_failures=5):
    result = PropertyResult(check.suite, check.name, check.cases, check.tolerance)
    started = time.perf_counter()
    for i in range(check.cases):
        cs = case_seed(seed, i)
        try:
            err = float(check.run(np.random.default_rng(cs)))
        except Exception as exc:  # any exception is a failing case, not a crash
            result.failures.append({"case": i, "seed": cs, "error": f"{type(exc).__name__}: {exc}"})
        else:
            result.max_error = max(result.max_error, err)
            if not err <= check.tolerance:
                result.failures.append({"case": i, "seed": cs, "error": err})
        if len(result.failures) >= max_failures:
            break
    result.seconds = round(time.perf_counter() - started, 3)
    return result


def _maxdiff(a, b):
    a, b = np.asarray(getattr(a, "data", a)), np.asarray(getattr(b, "data", b))
    if a.shape != b.shape:
        return np.inf
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _random_mask(rng, rows, cols):
    mask = rng.random((rows, cols)) < 0.5
    mask[np.arange(rows), rng.integers(0, cols, rows)] = True
    return mask


# -- oracle agreement --------------------------------------------------------------

def _ss_case(rng):
    C, H, W = int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
    k = int(rng.choice([1, 3, 5]))
    while k > 2 * min(H, W) + 1:
        k -= 2
    q = rng.standard_normal((C, H, W))
    return _maxdiff(self_similarity_map(nc.Tensor(q), k), oracle.ss_oracle(q, k))


def _qkv(rng):
    nq, nk, c, cv = (int(n) for n in rng.integers(1, 9, 4))
    return rng.standard_normal((nq, c)), rng.standard_normal((nk, c)), rng.standard_normal((nk, cv))


def _scaled_case(rng):
    q, k, v = _qkv(rng)
    return _maxdiff(scaled_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v)), oracle.attn_oracle(q, k, v)[0])


def _rectified_case(rng):
    q, k, v = _qkv(rng)
    mask = _random_mask(rng, len(q), len(k))
    out = rectified_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v), mask)
    return _maxdiff(out, oracle.attn_oracle(q, k, v, mask)[0])


def _expand_case(rng):
    k2, nt, hidden = int(rng.choice([1, 9, 25])), int(rng.integers(1, 7)), int(rng.integers(1, 7))
    H, W = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    with nc.precision(np.float64):
        params = ConvExpand(k2, nt, rng, hidden=hidden)
    ss = rng.standard_normal((k2, H, W))
    ref = oracle.expand_oracle(ss, params.conv1.weight.data, params.conv1.bias.data,
                               params.conv2.weight.data, params.conv2.bias.data)
    return _maxdiff(expand_similarity(nc.Tensor(ss), params), ref)


def _sca_case(rng):
    nt, H, W, c = (int(n) for n in rng.integers(1, 8, 4))
    m, v = rng.standard_normal((nt, H, W)) * 3, rng.standard_normal((nt, c))
    return _maxdiff(sca_attend(nc.Tensor(m), nc.Tensor(v)), oracle.sca_oracle(m, v))


def _matmul_case(rng):
    n, k, m = (int(x) for x in rng.integers(1, 9, 3))
    a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    return _maxdiff(nc.matmul(nc.Tensor(a), nc.Tensor(b)), oracle.matmul_oracle(a, b))


def _softmax_case(rng):
    rows, cols = int(rng.integers(1, 6)), int(rng.integers(1, 9))
    x = rng.standard_normal((rows, cols)) * 4
    mask = _random_mask(rng, rows, cols)
    ref = np.stack([oracle.softmax_oracle(np.where(mask[i], x[i], -np.inf)) for i in range(rows)])
    return _maxdiff(nc.softmax(nc.Tensor(x), axis=-1, mask=mask), ref)


def _conv_case(rng):
    cin, cout, H, W = (int(n) for n in rng.integers(1, 6, 4))
    k = int(rng.choice([1, 3, 5]))
    x, w, b = rng.standard_normal((cin, H, W)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)
    return _maxdiff(nc.conv2d(nc.Tensor(x), nc.Tensor(w), nc.Tensor(b)), oracle.conv_oracle(x, w, b))


def _resize_case(rng):
    labels = rng.integers(0, 4, (int(rng.integers(1, 10)), int(rng.integers(1, 10))))
    H, W = int(rng.integers(1, 20)), int(rng.integers(1, 20))
    return float(np.any(nc.resize_nearest(labels, H, W) != oracle.resize_oracle(labels, H, W)))


def oracle_checks():
    return [
        Check("oracles", "self_similarity_map", 100, 1e-12, _ss_case),
        Check("oracles", "scaled_attention", 50, 1e-10, _scaled_case),
        Check("oracles", "rectified_attention", 50, 1e-10, _rectified_case),
        Check("oracles", "expand_similarity", 50, 1e-10, _expand_case),
        Check("oracles", "sca_attend", 50, 1e-10, _sca_case),
        Check("oracles", "matmul", 50, 1e-10, _matmul_case),
        Check("oracles", "masked_softmax", 50, 1e-12, _softmax_case),
        Check("oracles", "conv2d", 30, 1e-10, _conv_case),
        Check("oracles", "resize_nearest", 50, 0.0, _resize_case),
    ]


# -- gradient checks ------------------------------------------------------------------

GRAD_TOL = 1e-4


def _t(rng, *shape):
    return nc.Tensor(rng.standard_normal(shape))


def _probe(out, rng):
    """Scalar loss ``sum(out * w)`` with a fixed random projection ``w``."""
    w = rng.standard_normal(out.shape)
    return lambda y: nc.sum(nc.mul(y, w))


def _grad_primitives(rng):
    q, k, v = _t(rng, 4, 3), _t(rng, 5, 3), _t(rng, 5, 2)
    mask = _random_mask(rng, 4, 5)
    x, w, b = _t(rng, 2, 5, 4), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    s, v3 = _t(rng, 3, 4, 5), _t(rng, 3, 2)
    row_mask = _random_mask(rng, 4, 3)
    cases = [
        (lambda: nc.matmul(q, k.swapaxes(-1, -2)), {"q": q, "k": k}),
        (lambda: nc.softmax(q, mask=row_mask), {"q": q}),
        (lambda: nc.conv2d(x, w, b), {"x": x, "w": w, "b": b}),
        (lambda: rectified_attention(q, k, v, mask), {"q": q, "k": k, "v": v}),
        (lambda: self_similarity_map(s, 3), {"s": s}),
        (lambda: sca_attend(s, v3), {"s": s, "v3": v3}),
    ]
    worst = 0.0
    for f, params in cases:
        proj = _probe(f(), rng)
        worst = max(worst, nc.grad_check(lambda: proj(f()), params))
    return worst


def _grad_gsf(rng):
    with nc.precision(np.float64):
        params = GsfParams(3, 5, rng, layers=2, width=4)
    params.alpha.data[...] = 0.4
    z, y_e = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 3, 5))
    s = rng.integers(0, 4, (1, 4, 4)) / 4
    w = rng.standard_normal(z.shape)

    def loss():
        return nc.sum(nc.mul(gated_inject(z, gsf_forward(z, s, y_e, params), params.alpha), w))

    return nc.grad_check(loss, params.parameters())


def _grad_sfe(rng):
    with nc.precision(np.float64):
        block = SFEBlock(4, 5, 3, rng, attn_dim=4, k=3, groups=2)
    block.gate.beta.data[...] = 0.5
    x, ctx = rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 3, 5))
    layout = rng.integers(0, 3, (4, 4))
    mask = np.eye(3, dtype=bool)[layout.reshape(-1)][None]
    w = rng.standard_normal(x.shape)
    return nc.grad_check(lambda: nc.sum(nc.mul(block(x, ctx, mask), w)), block.parameters())


def _opened_debug_model(rng):
    model = Denoiser(ModelConfig.debug(seed=int(rng.integers(1 << 31))))
    model.gsf.alpha.data[...] = 0.3
    for blk in model.sfe_blocks():
        blk.gate.beta.data[...] = 0.4
    model.conv_out.weight.data[...] = 0.1 * rng.standard_normal(model.conv_out.weight.shape)
    return model


def _debug_batch(rng, cfg, batch=2):
    """Scenes generated at 32x32 and nearest-downsampled to the model size."""
    scenes = [downsample_scene(gen_scene(int(rng.integers(1 << 31))), cfg.image_size) for _ in range(batch)]
    z0 = np.stack([s.image for s in scenes]) * 2 - 1
    return (z0, np.stack([s.layout for s in scenes]), [s.grounded_ids for s in scenes],
            [s.caption_ids for s in scenes])


def _grad_model(rng, max_entries=None):
    model = _opened_debug_model(rng)
    cfg = model.config
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    z0, layouts, grounded, captions = _debug_batch(rng, cfg)
    t = rng.integers(0, cfg.T, 2)
    eps = rng.standard_normal(z0.shape)

    def loss():
        return denoise_loss(model, z0, layouts, grounded, captions, t, eps, sched)

    return nc.grad_check(loss, model.parameters(), max_entries=max_entries, seed=int(rng.integers(1 << 31)))


def grad_checks(model_entries=20):
    return [
        Check("grads", "primitives", 3, GRAD_TOL, _grad_primitives),
        Check("grads", "gsf_stack", 1, GRAD_TOL, _grad_gsf),
        Check("grads", "sfe_block", 1, GRAD_TOL, _grad_sfe),
        Check("grads", "full_model_loss", 1, GRAD_TOL, lambda rng: _grad_model(rng, model_entries)),
    ]


# -- properties -----------------------------------------------------------------------

def _rectification_zero_mass(rng):
    q, k, v = _qkv(rng)
    mask = _random_mask(rng, len(q), len(k))
    weights = attention_weights(q * 5, k, mask)
    return float(np.abs(weights[~mask]).max()) if (~mask).any() else 0.0


def _singleton_rows(rng):
    q, k, _ = _qkv(rng)
    mask = np.zeros((len(q), len(k)), dtype=bool)
    mask[np.arange(len(q)), rng.integers(0, len(k), len(q))] = True
    return float(np.abs(attention_weights(q, k, mask)[mask] - 1).max())


def _attention_rows_are_distributions(rng):
    q, k, _ = _qkv(rng)
    w = attention_weights(q.astype(np.float32) * 3, k.astype(np.float32), _random_mask(rng, len(q), len(k)))
    if w.min() < 0 or w.max() > 1:
        return np.inf
    return float(np.abs(w.sum(-1) - 1).max())


def _layout_mask_one_token(rng):
    scene = gen_scene(int(rng.integers(1 << 31)), SceneSpec.from_variant(str(rng.choice(["touching", "apart"]))))
    mask = build_region_mask(scene.layout[None], [scene.grounded_ids], DEFAULT_VOCAB.class_tokens())
    return float(np.any(mask.allowed.sum(-1) != 1))


def _gate_identity_gsf(rng):
    z = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    o = rng.standard_normal(z.shape).astype(np.float32)
    out = gated_inject(z, o, nc.Tensor(np.array(0.0)))
    return float(out.data.tobytes() != z.tobytes())


def _gate_identity_sfe(rng):
    block = SFEBlock(4, 5, 3, rng, attn_dim=4, groups=2)
    x = nc.Tensor(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
    ctx = nc.Tensor(rng.standard_normal((1, 3, 5)).astype(np.float32))
    mask = np.eye(3, dtype=bool)[rng.integers(0, 3, 16)][None]
    out = block(x, ctx, mask)
    tokens = nc.reshape(block.norm(x), (1, 4, 16)).swapaxes(-1, -2)
    rca = rectified_attention(block.attn.to_q(tokens), block.attn.to_k(ctx), block.attn.to_v(ctx), mask,
                              block.attn.proj)
    expected = nc.add(x, nc.reshape(rca.swapaxes(-1, -2), x.shape))
    return float(out.data.tobytes() != expected.data.tobytes())


def _caption_invariance(rng):
    model = Denoiser(ModelConfig.debug(seed=int(rng.integers(1 << 31)), dtype="float32"))
    model.conv_out.weight.data[...] = 0.1 * rng.standard_normal(model.conv_out.weight.shape)
    z0, layouts, grounded, _ = _debug_batch(rng, model.config)
    t = rng.integers(0, model.config.T, 2)
    a = model(z0, t, layouts, grounded, [DEFAULT_VOCAB.encode(["a", "bright", "ball"])] * 2).data
    b = model(z0, t, layouts, grounded, [[], DEFAULT_VOCAB.encode(["dark", "scene"])]).data
    return float(a.tobytes() != b.tobytes())


def _cfg_identities(rng):
    model = _opened_debug_model(rng)
    cfg = model.config
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    _, layouts, grounded, captions = _debug_batch(rng, cfg, batch=1)
    seed = int(rng.integers(1 << 31))

    def run(scale, caps):
        return sample_loop(model, layouts, grounded, caps, sched, GuidanceConfig(scale=scale), seed=seed)

    cond, uncond = run(1.0, captions), run(1.0, [[]])
    exact = float(run(0.0, captions).tobytes() != uncond.tobytes())
    exact += float(run(1.0, captions).tobytes() != cond.tobytes())
    # the scale-2 step equals the affine combination of the two predictions
    x = rng.standard_normal((1, 3, cfg.image_size, cfg.image_size))
    e_c = model(x, [5], layouts, grounded, captions).data
    e_u = model(x, [5], layouts, grounded, [[]]).data
    return exact + _maxdiff(cfg_epsilon(e_c, e_u, 2.0), 2 * e_c - e_u)


def _softmax_rows(rng):
    x = (rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 30)))) * 20).astype(np.float32)
    out = nc.softmax(nc.Tensor(x)).data
    if out.min() < 0 or out.max() > 1:
        return np.inf
    return float(np.abs(out.sum(-1) - 1).max())


def _resize_idempotent(rng):
    labels = rng.integers(0, 4, (int(rng.integers(1, 12)), int(rng.integers(1, 12))))
    same = nc.resize_nearest(labels, *labels.shape)
    up = nc.resize_nearest(labels, 2 * labels.shape[0], 3 * labels.shape[1])
    return float(not np.array_equal(same, labels) or not np.array_equal(nc.resize_nearest(up, *up.shape), up))


def _ss_symmetry(rng):
    # ss[t](p) == ss[mirror t](p + offset t) wherever both pixels are inside
    C, H, W, k = int(rng.integers(1, 5)), int(rng.integers(3, 9)), int(rng.integers(3, 9)), 3
    ss = self_similarity_map(nc.Tensor(rng.standard_normal((C, H, W))), k).data
    half, worst = k // 2, 0.0
    for t in range(k * k):
        di, dj = t // k - half, t % k - half
        mirror = k * k - 1 - t
        a = ss[t, max(0, -di):H - max(0, di), max(0, -dj):W - max(0, dj)]
        b = ss[mirror, max(0, di):H + min(0, di), max(0, dj):W + min(0, dj)]
        worst = max(worst, _maxdiff(a, b))
    return worst


def _forward_determinism(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def once():
        return nc.softmax(nc.conv2d(nc.Tensor(x), nc.Tensor(w)), axis=1).data.tobytes()

    return float(once() != once())


def _scene_consistency(rng):
    spec = SceneSpec.from_variant(str(rng.choice(["touching/bright", "touching/dark", "apart/bright", "apart/dark"])))
    scene = gen_scene(int(rng.integers(1 << 31)), spec)
    base = (PALETTE[scene.layout] * LUMINANCE[spec.attribute]).transpose(2, 0, 1)
    return float(np.abs(scene.image - base).max()) / NOISE_SIGMA


def _q_sample_variance(rng):
    sched = make_schedule()
    t = int(rng.integers(0, sched.T))
    n = 10_000
    z0 = rng.standard_normal(n) * 0.5
    out = q_sample(z0.reshape(n, 1, 1, 1), np.full(n, t), rng.standard_normal((n, 1, 1, 1)), sched)
    abar = sched.alpha_bars[t]
    expected = abar * z0.var() + (1 - abar)
    # sample variance of ~Gaussian data has relative sd sqrt(2/(n-1)); report in sigmas
    return abs(out.var() - expected) / (expected * np.sqrt(2 / (n - 1)))


def property_checks():
    return [
        Check("properties", "rectification_zero_mass", 100, 0.0, _rectification_zero_mass),
        Check("properties", "singleton_rows_weight_one", 50, 1e-12, _singleton_rows),
        Check("properties", "attention_rows_are_distributions", 50, 1e-6, _attention_rows_are_distributions),
        Check("properties", "layout_mask_one_token_per_pixel", 20, 0.0, _layout_mask_one_token),
        Check("properties", "gsf_gate_identity", 20, 0.0, _gate_identity_gsf),
        Check("properties", "sfe_gate_identity", 10, 0.0, _gate_identity_sfe),
        Check("properties", "caption_invariance_at_init", 3, 0.0, _caption_invariance),
        Check("properties", "guidance_identities", 2, 1e-12, _cfg_identities),
        Check("properties", "softmax_rows", 50, 1e-6, _softmax_rows),
        Check("properties", "resize_idempotent", 50, 0.0, _resize_idempotent),
        Check("properties", "self_similarity_symmetry", 30, 1e-12, _ss_symmetry),
        Check("properties", "forward_determinism", 10, 0.0, _forward_determinism),
        Check("properties", "scene_within_noise_bound", 30, 5.0, _scene_consistency),
        Check("properties", "q_sample_variance_law", 5, 3.0, _q_sample_variance),
    ]


def checks_for(suite):
    if suite not in SUITES + ("all",):
        raise ValueError(f"unknown suite {suite!r}")
    table = {"oracles": oracle_checks, "grads": grad_checks, "properties": property_checks}
    names = SUITES if suite == "all" else (suite,)
    return [c for name in names for c in table[name]()]


def run_suite(suite="all", seed=0, progress=None):
    """Run every check of ``suite``; returns a JSON-serializable report."""
    results = []
    for check in checks_for(suite):
        res = run_check(check, seed)
        if progress is not None:
            progress(res)
        results.append(res.to_dict())
    return {"suite": suite, "seed": seed, "passed": all(r["passed"] for r in results), "properties": results}
