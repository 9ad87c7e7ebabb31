import numpy as np
import pytest

from coherdiff import numcore as nc
from coherdiff.diffusion import (GuidanceConfig, cfg_epsilon, denoise_loss, make_schedule, q_sample,
                                 sample_loop)
from coherdiff.errors import ParameterError, SamplingError, TrainingError
from coherdiff.oracle import ancestral_oracle


class StubModel:
    """Predicts ``fn(x, t, captions)``; records caption arguments."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, x, t, s, y_g, y_e):
        self.calls.append([list(c) for c in y_e])
        return nc.Tensor(self.fn(np.asarray(x), np.asarray(t), y_e))


def caption_model(x, t, y_e):
    # a smooth stub whose output depends on the caption length
    scale = np.array([0.1 + 0.05 * len(c) for c in y_e]).reshape(-1, 1, 1, 1)
    return np.tanh(x) * scale + 0.01 * t.reshape(-1, 1, 1, 1) / 20


@pytest.fixture
def sched():
    return make_schedule(20, 1e-3, 0.2)


LAYOUT = np.zeros((1, 4, 4), dtype=int)


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.01, 0.01)
        np.testing.assert_allclose(s.alpha_bars, [0.99], rtol=0, atol=1e-15)

    def test_default_is_strictly_decreasing(self):
        s = make_schedule()
        assert s.T == 200 and np.all(np.diff(s.alpha_bars) < 0)
        assert 0 < s.alpha_bars[-1] < s.alpha_bars[0] < 1

    def test_three_steps_by_hand(self):
        s = make_schedule(3, 0.1, 0.3)
        np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3], atol=1e-15)
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7], atol=1e-15, rtol=0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_bounds(self, args):
        with pytest.raises(ParameterError):
            make_schedule(*args)


class TestQSample:
    def test_limit_no_noise(self):
        s = make_schedule(1, 1e-12, 1e-12)
        z0 = np.array([0.5, -0.3])
        np.testing.assert_allclose(q_sample(z0, 0, np.ones(2), s), z0, atol=1e-5)

    def test_quarter_alpha_bar(self):
        s = make_schedule(1, 0.75, 0.75)
        z0, eps = np.array([1.0, 2.0]), np.array([0.5, -1.0])
        np.testing.assert_allclose(q_sample(z0, 0, eps, s), 0.5 * z0 + np.sqrt(3) / 2 * eps, atol=1e-15)

    def test_zero_noise(self, sched):
        z0 = np.array([1.0, -2.0])
        np.testing.assert_allclose(q_sample(z0, 7, np.zeros(2), sched), np.sqrt(sched.alpha_bars[7]) * z0)

    def test_per_item_steps(self, sched):
        z0, eps = np.ones((2, 3)), np.zeros((2, 3))
        out = q_sample(z0, np.array([0, 19]), eps, sched)
        np.testing.assert_allclose(out[:, 0], np.sqrt(sched.alpha_bars[[0, 19]]))

    @pytest.mark.parametrize("t", [-1, 20])
    def test_step_range(self, sched, t):
        with pytest.raises(ParameterError):
            q_sample(np.ones(2), t, np.ones(2), sched)

    def test_variance_law(self, sched):
        rng = np.random.default_rng(0)
        n, t = 10_000, 12
        z0 = rng.standard_normal(n) * 0.7
        out = q_sample(z0, t, rng.standard_normal(n), sched)
        abar = sched.alpha_bars[t]
        expected = abar * z0.var() + 1 - abar
        assert abs(out.var() - expected) <= 3 * expected * np.sqrt(2 / (n - 1))


class TestDenoiseLoss:
    def _run(self, sched, fn):
        rng = np.random.default_rng(1)
        z0, eps = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
        model = StubModel(lambda x, t, y: fn(x, t, eps))
        loss = denoise_loss(model, z0, np.zeros((2, 4, 4), int), [[2], [2]], [[], []], np.array([3, 9]), eps, sched)
        return loss.item(), eps

    def test_exact_prediction(self, sched):
        assert self._run(sched, lambda x, t, eps: eps)[0] == 0.0

    def test_constant_offset(self, sched):
        assert self._run(sched, lambda x, t, eps: eps + 0.3)[0] == pytest.approx(0.09, abs=1e-14)

    def test_matches_direct_mse(self, sched):
        other = np.random.default_rng(9).standard_normal((2, 3, 4, 4))
        value, eps = self._run(sched, lambda x, t, eps: other)
        assert value == pytest.approx(float(np.mean((eps - other) ** 2)), abs=1e-12)

    def test_non_finite_prediction(self, sched):
        with pytest.raises(TrainingError):
            self._run(sched, lambda x, t, eps: eps * np.nan)


class TestGuidance:
    def test_scale_identities(self):
        rng = np.random.default_rng(2)
        c, u = rng.standard_normal(5), rng.standard_normal(5)
        assert cfg_epsilon(c, u, 1.0).tobytes() == c.tobytes()
        assert cfg_epsilon(c, u, 0.0).tobytes() == u.tobytes()
        np.testing.assert_array_equal(cfg_epsilon(np.array([1.0]), np.array([0.0]), 2.0), [2.0])

    def test_affine_in_scale(self):
        rng = np.random.default_rng(3)
        c, u = rng.standard_normal(4), rng.standard_normal(4)
        a, b = cfg_epsilon(c, u, 0.5), cfg_epsilon(c, u, 3.5)
        np.testing.assert_allclose(cfg_epsilon(c, u, 2.0), a + (b - a) * 0.5, atol=1e-12)

    @pytest.mark.parametrize("kw", [{"scale": -1.0}, {"uncond_drop_prob": 1.0}, {"uncond_drop_prob": -0.1}])
    def test_config_bounds(self, kw):
        with pytest.raises(ParameterError):
            GuidanceConfig(**kw)


class TestSampleLoop:
    def test_same_seed_is_bitwise_repeatable(self, sched):
        runs = [sample_loop(StubModel(caption_model), LAYOUT, [[2]], [[3, 4]], sched, seed=11) for _ in range(2)]
        assert runs[0].tobytes() == runs[1].tobytes()

    def test_different_seeds_differ(self, sched):
        a = sample_loop(StubModel(caption_model), LAYOUT, [[2]], [[3]], sched, seed=1)
        b = sample_loop(StubModel(caption_model), LAYOUT, [[2]], [[3]], sched, seed=2)
        assert not np.array_equal(a, b)

    def test_scale_zero_is_unconditional(self, sched):
        guided = sample_loop(StubModel(caption_model), LAYOUT, [[2]], [[3, 4]], sched, GuidanceConfig(0.0), seed=5)
        uncond = sample_loop(StubModel(caption_model), LAYOUT, [[2]], [[]], sched, GuidanceConfig(1.0), seed=5)
        assert guided.tobytes() == uncond.tobytes()

    def test_scale_one_is_conditional(self, sched):
        model = StubModel(caption_model)
        sample_loop(model, LAYOUT, [[2]], [[3, 4]], sched, GuidanceConfig(1.0), seed=5)
        assert all(call == [[3, 4]] for call in model.calls)

    def test_null_caption_routes_unconditional_branch(self, sched):
        model = StubModel(caption_model)
        sample_loop(model, LAYOUT, [[2]], [[3, 4]], sched, GuidanceConfig(2.0), seed=5)
        assert model.calls[0] == [[3, 4]] and model.calls[1] == [[]]
        assert len(model.calls) == 2 * sched.T

    def test_zero_noise_model_matches_scalar_recursion(self, sched):
        seed = 21
        out = sample_loop(StubModel(lambda x, t, y: np.zeros_like(x)), LAYOUT, [[2]], [[]], sched,
                          GuidanceConfig(1.0), seed=seed, clip=False)
        rng = np.random.default_rng(seed)
        x_T = rng.standard_normal((1, 3, 4, 4))
        noises = {t: rng.standard_normal((1, 3, 4, 4)) for t in reversed(range(1, sched.T))}
        np.testing.assert_allclose(out, ancestral_oracle(x_T, sched.betas, noises), atol=1e-10, rtol=0)

    def test_stub_model_matches_scalar_recursion(self, sched):
        fn = lambda x, t, y: 0.3 * np.sin(x)  # noqa: E731
        out = sample_loop(StubModel(fn), LAYOUT, [[2]], [[]], sched, GuidanceConfig(1.0), seed=4, clip=False)
        rng = np.random.default_rng(4)
        x_T = rng.standard_normal((1, 3, 4, 4))
        noises = {t: rng.standard_normal((1, 3, 4, 4)) for t in reversed(range(1, sched.T))}
        ref = ancestral_oracle(x_T, sched.betas, noises, eps_fn=lambda x, t: 0.3 * np.sin(x))
        np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)

    def test_deterministic_variant_ignores_seed_after_start(self, sched):
        model = StubModel(caption_model)
        a = sample_loop(model, LAYOUT, [[2]], [[3]], sched, seed=3, deterministic=True)
        b = sample_loop(model, LAYOUT, [[2]], [[3]], sched, seed=3, deterministic=True)
        assert a.tobytes() == b.tobytes() and np.all(np.isfinite(a))

    def test_clipped_output_range(self, sched):
        out = sample_loop(StubModel(caption_model), LAYOUT, [[2]], [[3]], sched, seed=0)
        assert np.all(np.abs(out) <= 1.5)

    def test_non_finite_state_reports_step(self, sched):
        def blowup(x, t, y):
            return np.full_like(x, np.nan) if int(t[0]) == 13 else np.zeros_like(x)

        with pytest.raises(SamplingError) as err:
            sample_loop(StubModel(blowup), LAYOUT, [[2]], [[]], sched, GuidanceConfig(1.0), seed=0, clip=False)
        assert err.value.step == 13

    def test_callback_sees_every_step(self, sched):
        seen = []
        sample_loop(StubModel(caption_model), LAYOUT, [[2]], [[]], sched, seed=0, callback=lambda t, x: seen.append(t))
        assert seen == list(reversed(range(sched.T)))
