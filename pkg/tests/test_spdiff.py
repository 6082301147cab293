import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import OracleRestorer
from ldctdiff.core import PrelogProjection, Rng
from ldctdiff.nn import ArchSpec, build_regressor
from ldctdiff.physics import make_lambda_schedule, shifted_poisson_degrade
from ldctdiff.spdiff import SpdiffModel, match_projection_timestep, spdiff_denoise, spdiff_sample_step

SCHED = make_lambda_schedule()


class TestTimestepMatch:
    @pytest.mark.parametrize("i_ld, t", [(31250, 8), (25000, 10), (62500, 4), (125000, 1), (3e5, 1), (1e3, 10)])
    def test_fixtures(self, i_ld, t):
        assert match_projection_timestep(i_ld, SCHED) == t

    def test_tie_goes_to_smaller_t(self):
        mid = 0.5 * (SCHED[4] + SCHED[5])
        assert match_projection_timestep(mid, SCHED) == 4

    def test_invalid(self):
        with pytest.raises(ValueError):
            match_projection_timestep(0.0, SCHED)

    @settings(max_examples=50)
    @given(st.floats(1e3, 1e6), st.floats(1e3, 1e6))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert match_projection_timestep(lo, SCHED) >= match_projection_timestep(hi, SCHED)


class TestSampleStep:
    def test_t_range(self):
        m = OracleRestorer(SCHED, 0.5)
        for t in (1, 11):
            with pytest.raises(ValueError):
                spdiff_sample_step(np.ones((2, 2)), t, m, Rng(0))

    def test_negative_estimate_clamped(self):
        m = OracleRestorer(SCHED, -1.0)
        y = spdiff_sample_step(np.full((4, 4), 0.2), 5, m, Rng(0))
        np.testing.assert_allclose(y, SCHED[5] * 0.2 / SCHED[4])

    def test_noise_shrinks_along_chain(self):
        y0 = 0.4
        m = OracleRestorer(SCHED, y0)
        rng = Rng(1)
        y = shifted_poisson_degrade(np.full((200, 200), y0), 10, SCHED, 10.0, rng)
        stds = [y.std()]
        for t in range(10, 1, -1):
            y = spdiff_sample_step(y, t, m, rng)
            stds.append(y.std())
        assert np.all(np.diff(stds) < 0)


class TestDenoise:
    def test_oracle_noiseless_fixed_point(self):
        y0 = np.exp(-np.random.default_rng(0).random((12, 20)))
        m = OracleRestorer(SCHED, y0)
        out, t = spdiff_denoise(y0, 62500, m, Rng(0))
        assert t == 4
        np.testing.assert_array_equal(out, y0)
        assert m.calls == t  # t* - 1 steps plus the final restoration

    def test_wraps_projection(self):
        y = PrelogProjection(np.full((4, 4), 0.5), meta={"i_ld": 25000.0})
        out, t = spdiff_denoise(y, 25000.0, OracleRestorer(SCHED, 0.5), Rng(0))
        assert isinstance(out, PrelogProjection)
        assert out.meta["t_prj"] == t == 10 and out.meta["i_ld"] == 25000.0

    def test_deterministic(self):
        y = np.exp(-np.random.default_rng(1).random((8, 8)))
        m = OracleRestorer(SCHED, y)
        a = spdiff_denoise(y, 30000, m, Rng(5))[0]
        b = spdiff_denoise(y, 30000, m, Rng(5))[0]
        np.testing.assert_array_equal(a, b)


class TestModel:
    def test_untrained_restore_is_identity(self):
        m = SpdiffModel(build_regressor(ArchSpec(in_channels=2, width=4)), SCHED)
        y = np.exp(-np.random.default_rng(2).random((10, 16)))
        np.testing.assert_allclose(m.restore(y, 3), y, rtol=0, atol=0)

    def test_noise_scale_matches_poisson_std(self):
        m = SpdiffModel(build_regressor(ArchSpec(in_channels=2, width=4)), SCHED)
        s = m.noise_scale(np.full((6, 6), 0.5), 7)
        np.testing.assert_allclose(s, np.sqrt(0.5 / SCHED[7]))
        # batched t broadcasts per sample
        s2 = m.noise_scale(np.full((2, 6, 6), 0.5), np.array([1, 10]))
        np.testing.assert_allclose(s2[1], np.sqrt(0.5 / SCHED[10]))
