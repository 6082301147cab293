import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import OracleRestorer, moment_bounds_ok
from ldctdiff.core import PrelogProjection, Rng
from ldctdiff.physics import (
    NoiseModelParams,
    gaussian_forward,
    make_alpha_bar_schedule,
    make_lambda_schedule,
    shifted_poisson_degrade,
    simulate_low_dose,
)
from ldctdiff.spdiff import spdiff_sample_step

N = 100_000
GRID = (100, 1000)


class TestLambdaSchedule:
    def test_endpoints(self):
        s = make_lambda_schedule(10, 3e5, 2.5e4)
        assert s[0] == pytest.approx(3e5, rel=1e-12)
        assert s[10] == pytest.approx(2.5e4, rel=1e-12)

    @pytest.mark.parametrize("t, expected", [(5, 46153.846153846), (8, 30612.244897959)])
    def test_harmonic_midpoints(self, t, expected):
        # independent route: 1/lambda_t is the linear blend of the endpoint reciprocals
        inv = ((10 - t) / 3e5 + t / 2.5e4) / 10
        assert 1 / inv == pytest.approx(expected, rel=1e-9)
        assert make_lambda_schedule()[t] == pytest.approx(1 / inv, rel=1e-9)

    def test_reciprocal_is_affine(self):
        s = make_lambda_schedule()
        inv = 1 / s.values
        line = inv[0] + (inv[-1] - inv[0]) * np.arange(11) / 10
        assert np.max(np.abs(inv - line) / line) < 1e-12

    def test_strictly_decreasing(self):
        assert np.all(np.diff(make_lambda_schedule().values) < 0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_lambda_schedule(10, 1e4, 2e4)
        with pytest.raises(ValueError):
            make_lambda_schedule(0)

    def test_endpoint_at_one(self):
        s = make_lambda_schedule(10, 3e5, 2.5e4, endpoint_at=1)
        assert s[1] == pytest.approx(3e5)
        assert s[10] == pytest.approx(2.5e4)
        assert np.isinf(s[0])
        inv = 1 / s.values[1:]
        assert np.allclose(np.diff(inv), np.diff(inv)[0], rtol=1e-12)


class TestAlphaBar:
    def test_zero_is_one_and_monotone(self):
        s = make_alpha_bar_schedule()
        assert s.alpha_bars[0] == 1.0
        assert np.all(np.diff(s.alpha_bars) < 0)

    def test_early_noise_levels(self):
        # oracle: explicit product of (1 - beta) with a linear beta ramp
        betas = [1e-4 + (0.02 - 1e-4) * k / 999 for k in range(4)]
        ab3 = (1 - betas[0]) * (1 - betas[1]) * (1 - betas[2])
        ab4 = ab3 * (1 - betas[3])
        s = make_alpha_bar_schedule()
        assert s.noise_std[3] == pytest.approx(np.sqrt(1 - ab3), rel=1e-9)
        assert s.noise_std[4] == pytest.approx(np.sqrt(1 - ab4), rel=1e-9)
        assert s.noise_std[3] == pytest.approx(0.0190, abs=5e-5)
        assert s.noise_std[4] == pytest.approx(0.0228, abs=5e-5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_alpha_bar_schedule(1000, 0.0, 0.02)
        with pytest.raises(ValueError):
            make_alpha_bar_schedule(1000, 0.03, 0.02)


class TestSimulateLowDose:
    def test_photon_count_recorded(self):
        y = simulate_low_dose(np.full((2, 2), 0.5), 0.25, NoiseModelParams(), Rng(0))
        assert y.meta["i_ld"] == 62500.0

    def test_bad_dose(self):
        with pytest.raises(ValueError):
            simulate_low_dose(np.ones((2, 2)), 0.0, NoiseModelParams(), Rng(0))

    @pytest.mark.parametrize("y0, dose", [(0.6, 0.25), (0.02, 0.1), (1.0, 0.5)])
    def test_moments(self, y0, dose):
        p = NoiseModelParams()
        i_ld = dose * p.i0
        out = simulate_low_dose(np.full(GRID, y0), dose, p, Rng(11)).data
        ok, info = moment_bounds_ok(out, y0, (i_ld * y0 + p.sigma_e2) / i_ld**2)
        assert ok, info

    def test_high_dose_limit(self):
        y0 = np.linspace(0.05, 1, 50).reshape(5, 10)
        out = simulate_low_dose(y0, 1.0, NoiseModelParams(i0=1e12, sigma_e2=0.0), Rng(1)).data
        assert np.max(np.abs(out - y0) / y0) < 1e-4

    def test_full_dose_noiseless_electronics_unbiased(self):
        out = simulate_low_dose(np.full(GRID, 0.3), 1.0, NoiseModelParams(sigma_e2=0.0), Rng(2)).data
        ok, info = moment_bounds_ok(out, 0.3, 0.3 / 2.5e5)
        assert ok, info

    def test_keeps_projection_meta(self):
        y = PrelogProjection(np.full((3, 3), 0.5), meta={"slice": 4})
        out = simulate_low_dose(y, 0.5, NoiseModelParams(), Rng(0))
        assert out.meta["slice"] == 4 and out.meta["i_ld"] == 125000.0


class TestShiftedPoisson:
    sched = make_lambda_schedule()

    def test_zero_signal(self):
        out = shifted_poisson_degrade(np.zeros((4, 4)), 3, self.sched, 0.0, Rng(0))
        assert np.all(out == 0)

    def test_t_range(self):
        with pytest.raises(ValueError):
            shifted_poisson_degrade(np.zeros((2, 2)), 0, self.sched, 0.0, Rng(0))
        with pytest.raises(ValueError):
            shifted_poisson_degrade(np.zeros((2, 2)), 11, self.sched, 0.0, Rng(0))

    @pytest.mark.parametrize("t", [1, 5, 10])
    @pytest.mark.parametrize("y0", [0.01, 0.4])
    def test_moments(self, t, y0):
        lam = self.sched[t]
        out = shifted_poisson_degrade(np.full(GRID, y0), t, self.sched, 10.0, Rng(t))
        ok, info = moment_bounds_ok(out, y0 + 10.0 / lam, (lam * y0 + 10.0) / lam**2)
        assert ok, info

    def test_variance_inverse_in_lambda(self):
        # custom two-point schedule with lambda doubling
        s = make_lambda_schedule(2, 4e4, 1e4)  # values 4e4, 1.6e4, 1e4
        lam_a, lam_b = 1e4, 2e4
        y0 = 0.5
        from ldctdiff.physics import LambdaSchedule

        s = LambdaSchedule(2, 4e4, lam_a, np.array([4e4, lam_b, lam_a]))
        va = shifted_poisson_degrade(np.full(GRID, y0), 2, s, 0.0, Rng(1)).var()
        vb = shifted_poisson_degrade(np.full(GRID, y0), 1, s, 0.0, Rng(2)).var()
        assert va / vb == pytest.approx(2.0, rel=0.03)

    @pytest.mark.parametrize("t", range(2, 11))
    def test_nesting_marginal_consistency(self, t):
        y0 = 0.3
        rng = Rng(100 + t)
        y_t = shifted_poisson_degrade(np.full(GRID, y0), t, self.sched, 10.0, rng)
        y_prev = spdiff_sample_step(y_t, t, OracleRestorer(self.sched, y0), rng)
        lam = self.sched[t - 1]
        ok, info = moment_bounds_ok(y_prev, y0 + 10.0 / lam, (lam * y0 + 10.0) / lam**2)
        assert ok, info


class TestGaussianForward:
    sched = make_alpha_bar_schedule()

    def test_zero_signal_variance(self):
        x_t, eps = gaussian_forward(np.zeros(GRID), 500, self.sched, Rng(0))
        np.testing.assert_allclose(x_t, self.sched.noise_std[500] * eps)
        assert x_t.var() == pytest.approx(1 - self.sched.alpha_bars[500], rel=0.02)

    def test_mean(self):
        x0 = 0.7
        x_t, _ = gaussian_forward(np.full((100, 100), x0), 300, self.sched, Rng(3))
        ab = self.sched.alpha_bars[300]
        ok, info = moment_bounds_ok(x_t, np.sqrt(ab) * x0, 1 - ab)
        assert ok, info

    def test_no_noise_limit(self):
        s = make_alpha_bar_schedule(10, 1e-12, 1e-12)
        x0 = np.random.default_rng(0).random((8, 8))
        x_t, _ = gaussian_forward(x0, 1, s, Rng(0))
        np.testing.assert_allclose(x_t, x0, atol=1e-5)

    def test_t_range(self):
        with pytest.raises(ValueError):
            gaussian_forward(np.zeros((2, 2)), 0, self.sched, Rng(0))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 1000), st.integers(0, 2**32))
    def test_deterministic(self, t, seed):
        a = gaussian_forward(np.ones((4, 4)), t, self.sched, Rng(seed))
        b = gaussian_forward(np.ones((4, 4)), t, self.sched, Rng(seed))
        np.testing.assert_array_equal(a[0], b[0])
