import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divgate import schedule as S


class TestLinearSchedule:
    def test_training_default_t1000(self):
        sched = S.linear_schedule(1000, 1e-4, 0.02)
        assert sched.T == 1000
        assert sched.betas[0] == pytest.approx(1e-4)
        assert sched.betas[-1] == pytest.approx(0.02)

    def test_single_step(self):
        sched = S.linear_schedule(1, 0.5, 0.5)
        np.testing.assert_allclose(sched.betas, [0.5])
        np.testing.assert_allclose(sched.alpha_bars, [0.5])

    def test_midpoint_matches_interpolation_formula(self):
        # independent oracle: direct evaluation of the linear interpolation
        T, lo, hi = 1000, 1e-4, 0.02
        sched = S.linear_schedule(T, lo, hi)
        t = 500
        expected = lo + (hi - lo) * (t - 1) / (T - 1)
        assert sched.betas[t - 1] == pytest.approx(expected, rel=1e-12)

    def test_bounds_rejected(self):
        with pytest.raises(ValueError):
            S.linear_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            S.linear_schedule(10, 0.03, 0.02)
        with pytest.raises(ValueError):
            S.linear_schedule(0, 1e-4, 0.02)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 1500))
    def test_alpha_bar_invariants(self, T):
        sched = S.linear_schedule(T, 1e-4, 0.02)
        bars = sched.alpha_bars
        assert np.all(np.diff(bars) < 0) or T == 1
        # product identity within 1e-7
        recon = np.concatenate([[1.0], bars[:-1]]) * sched.alphas
        np.testing.assert_allclose(bars, recon, atol=1e-7)


class TestQSample:
    def test_zero_noise_limit(self):
        sched = S.linear_schedule(100)
        x0 = np.random.default_rng(0).normal(size=(2, 1, 4, 4)).astype(np.float32)
        out = S.q_sample(x0, 40, np.zeros_like(x0), sched)
        np.testing.assert_allclose(out, np.sqrt(sched.alpha_bars[39]) * x0, rtol=1e-6)

    def test_zero_signal_limit(self):
        sched = S.linear_schedule(100)
        eps = np.random.default_rng(1).normal(size=(2, 1, 4, 4)).astype(np.float32)
        out = S.q_sample(np.zeros_like(eps), 100, eps, sched)
        np.testing.assert_allclose(out, np.sqrt(1 - sched.alpha_bars[99]) * eps, rtol=1e-6)

    def test_monte_carlo_moments_three_sigma(self):
        # 10k draws at fixed t: per-pixel mean and variance match theory
        sched = S.linear_schedule(1000)
        t = 350
        bar = sched.alpha_bars[t - 1]
        rng = np.random.default_rng(7)
        x0 = rng.uniform(-1, 1, size=(4, 4)).astype(np.float32)
        n = 10_000
        eps = rng.standard_normal((n, 4, 4)).astype(np.float32)
        draws = S.q_sample(np.broadcast_to(x0, (n, 4, 4)).copy(), t, eps, sched)
        mean_expect = np.sqrt(bar) * x0
        se_mean = np.sqrt((1 - bar) / n)
        assert np.abs(draws.mean(axis=0) - mean_expect).max() <= 3 * se_mean
        var = draws.var(axis=0)
        se_var = (1 - bar) * np.sqrt(2.0 / (n - 1))
        assert np.abs(var - (1 - bar)).max() <= 3 * se_var

    def test_index_range_rejected(self):
        sched = S.linear_schedule(10)
        x = np.zeros((1, 2, 2), np.float32)
        with pytest.raises(IndexError):
            S.q_sample(x, 0, x, sched)
        with pytest.raises(IndexError):
            S.q_sample(x, 11, x, sched)

    def test_per_sample_t(self):
        sched = S.linear_schedule(50)
        x0 = np.ones((3, 1, 2, 2), np.float32)
        out = S.q_sample(x0, np.array([1, 25, 50]), np.zeros_like(x0), sched)
        for i, t in enumerate([1, 25, 50]):
            np.testing.assert_allclose(out[i], np.sqrt(sched.alpha_bars[t - 1]), rtol=1e-6)


class TestPStep:
    def test_final_step_ignores_noise(self):
        sched = S.linear_schedule(100)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
        e = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
        a = S.p_step(x, 1, e, sched, noise=rng.standard_normal(x.shape).astype(np.float32))
        b = S.p_step(x, 1, e, sched, noise=None)
        np.testing.assert_array_equal(a, b)

    def test_tiny_beta_is_identity(self):
        sched = S.linear_schedule(10, 1e-9, 1e-8)
        x = np.random.default_rng(4).normal(size=(1, 1, 3, 3)).astype(np.float32)
        out = S.p_step(x, 5, np.zeros_like(x), sched, noise=None)
        np.testing.assert_allclose(out, x, atol=1e-5)

    def _recover(self, sched, x0, seed=0):
        # analytic-denoiser oracle: eps_hat = (x_t - sqrt(bar) x0)/sqrt(1-bar)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(x0.shape).astype(np.float32)
        for k in range(sched.T, 0, -1):
            bar = sched.alpha_bars[k - 1]
            eps_hat = (x - np.sqrt(bar, dtype=np.float32) * x0) / np.sqrt(1 - bar, dtype=np.float32)
            x = S.p_step(x, k, eps_hat, sched, noise=None)
        return x

    def test_analytic_denoiser_recovers_x0_full_chain(self):
        sched = S.linear_schedule(1000)
        x0 = np.random.default_rng(5).uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32)
        assert np.abs(self._recover(sched, x0) - x0).max() < 0.05

    def test_analytic_denoiser_recovers_x0_respaced(self):
        sched = S.respace(S.linear_schedule(1000), 150)
        x0 = np.random.default_rng(6).uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32)
        assert np.abs(self._recover(sched, x0) - x0).max() < 0.05


class TestRespace:
    def test_identity_respacing(self):
        sched = S.linear_schedule(500)
        same = S.respace(sched, 500)
        np.testing.assert_allclose(same.betas, sched.betas, atol=1e-7)
        np.testing.assert_array_equal(same.original_indices, sched.original_indices)

    def test_inference_default_150_of_1000(self):
        sub = S.respace(S.linear_schedule(1000), 150)
        assert sub.T == 150
        assert sub.original_indices[-1] == 1000

    def test_kept_alpha_bars_bit_exact(self):
        sched = S.linear_schedule(777)
        for n in (1, 3, 77, 250, 777):
            sub = S.respace(sched, n)
            kept = np.searchsorted(sched.original_indices, sub.original_indices)
            assert np.array_equal(sub.alpha_bars, sched.alpha_bars[kept])

    def test_product_identity_on_subchain(self):
        sub = S.respace(S.linear_schedule(1000), 150)
        recon = np.concatenate([[1.0], sub.alpha_bars[:-1]]) * sub.alphas
        np.testing.assert_allclose(sub.alpha_bars, recon, atol=1e-7)

    def test_too_many_steps_rejected(self):
        with pytest.raises(ValueError):
            S.respace(S.linear_schedule(10), 11)


class TestValueRange:
    def test_signed_unit_roundtrip(self):
        img = np.random.default_rng(8).uniform(0, 1, (3, 3)).astype(np.float32)
        np.testing.assert_allclose(S.to_unit(S.to_signed(img)), img, atol=1e-6)

    def test_to_unit_clips(self):
        assert S.to_unit(np.array([-2.0, 2.0], np.float32)).tolist() == [0.0, 1.0]
