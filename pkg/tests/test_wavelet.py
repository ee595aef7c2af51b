import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcmcg import wavelet as wt


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestFilters:
    def test_lowpass_orthonormal(self):
        h = wt.DB4_DEC_LO
        assert h.sum() == pytest.approx(np.sqrt(2.0), abs=1e-12)
        for shift in range(0, len(h), 2):
            expected = 1.0 if shift == 0 else 0.0
            assert np.dot(h[shift:], h[:len(h) - shift]) == pytest.approx(expected, abs=1e-12)

    def test_highpass_vanishing_moments(self):
        k = np.arange(wt.FILTER_LEN)
        for p in range(4):
            assert abs(np.sum(wt.DB4_DEC_HI * k ** p)) < 1e-8 * max(1, 7 ** p)

    def test_max_level(self):
        assert wt.max_level(640) == 6
        assert wt.max_level(7) == 0
        assert wt.max_level(3) == 0


class TestTransform:
    @pytest.mark.parametrize("mode", wt.MODES)
    def test_round_trip_random(self, mode):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(64, 1025))
            x = rng.normal(size=n)
            dec = wt.dwt(x, wt.max_level(n), mode)
            worst = max(worst, _rel(wt.idwt(dec), x))
        assert worst < 1e-8

    def test_constant_has_zero_details(self):
        dec = wt.dwt(np.full(640, 3.7), 6, "periodic")
        for d in dec.details:
            np.testing.assert_allclose(d, 0.0, atol=1e-10)

    def test_linear_ramp_symmetric_interior(self):
        dec = wt.dwt(np.arange(256.0), 1, "symmetric")
        # away from the reflected edges a ramp is annihilated too
        np.testing.assert_allclose(dec.details[0][4:-4], 0.0, atol=1e-9)

    def test_energy_preserved_periodic(self):
        x = np.random.default_rng(1).normal(size=512)
        dec = wt.dwt(x, 5, "periodic")
        energy = sum(np.sum(d ** 2) for d in dec.details) + np.sum(dec.approx ** 2)
        assert energy == pytest.approx(np.sum(x ** 2), rel=1e-10)

    def test_odd_length(self):
        x = np.random.default_rng(2).normal(size=333)
        for mode in wt.MODES:
            np.testing.assert_allclose(wt.idwt(wt.dwt(x, 3, mode)), x, atol=1e-10)

    def test_infeasible_depth(self):
        with pytest.raises(ValueError, match="infeasible"):
            wt.dwt(np.ones(8), 9)

    def test_zero_levels(self):
        with pytest.raises(ValueError):
            wt.dwt(np.ones(64), 0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="boundary mode"):
            wt.dwt(np.ones(64), 1, "zero")

    def test_matches_pywavelets_symmetric(self):
        pywt = pytest.importorskip("pywt")
        x = np.random.default_rng(3).normal(size=640)
        dec = wt.dwt(x, 4, "symmetric")
        ref = pywt.wavedec(x, "db4", mode="symmetric", level=4)
        np.testing.assert_allclose(dec.approx, ref[0], atol=1e-10)
        for ours, theirs in zip(dec.details, reversed(ref[1:])):
            np.testing.assert_allclose(ours, theirs, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(16, 300), seed=st.integers(0, 2 ** 16), mode=st.sampled_from(wt.MODES))
    def test_round_trip_property(self, n, seed, mode):
        x = np.random.default_rng(seed).normal(size=n)
        dec = wt.dwt(x, wt.max_level(n), mode)
        np.testing.assert_allclose(wt.idwt(dec), x, atol=1e-9)
