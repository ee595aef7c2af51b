import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcmcg import dsp


def _two_sources(seed, n=2000):
    rng = np.random.default_rng(seed)
    square = np.sign(np.sin(2 * np.pi * 3.1 * np.arange(n) / 160.0))
    s = np.vstack([square, rng.laplace(size=n)])
    return s, rng.normal(size=(2, 2)) @ s


def _matched_corr(sources, truth):
    c = np.abs(np.corrcoef(np.vstack([sources, truth]))[:2, 2:])
    return max(min(c[0, 0], c[1, 1]), min(c[0, 1], c[1, 0]))


class TestRecording:
    def test_default_names(self):
        rec = dsp.RawRecording(np.zeros((3, 10)), 100.0)
        assert rec.channel_names == ["ch1", "ch2", "ch3"]

    def test_bad_rate(self):
        with pytest.raises(ValueError, match="rate"):
            dsp.RawRecording(np.zeros((2, 10)), 0.0)

    def test_bad_band(self):
        with pytest.raises(ValueError, match="Nyquist"):
            dsp.FilterSpec(band_high_hz=90.0).validate(160.0)


class TestFrequencyFilter:
    def test_hum_attenuated(self):
        t = np.arange(640) / 160.0
        hum = np.vstack([np.sin(2 * np.pi * 60 * t), np.cos(2 * np.pi * 60 * t + 1.0)])
        out = dsp.notch_stage(hum, 160.0, dsp.FilterSpec())
        assert 10 * np.log10(np.sum(hum ** 2) / np.sum(out ** 2)) >= 26.0

    def test_passband_preserved(self):
        t = np.arange(1280) / 160.0
        x = np.sin(2 * np.pi * 10 * t)[None]
        out = dsp.frequency_filter(dsp.RawRecording(x, 160.0), dsp.FilterSpec()).samples
        np.testing.assert_allclose(out[0, 100:-100], x[0, 100:-100], atol=5e-2)

    def test_shape_and_rate_kept(self):
        x = np.random.default_rng(0).normal(size=(4, 300))
        out = dsp.frequency_filter(dsp.RawRecording(x, 160.0), dsp.FilterSpec())
        assert out.samples.shape == x.shape and out.rate == 160.0

    def test_ar_pad_extends_sinusoid(self):
        t = np.arange(400)
        x = np.sin(0.2 * t)
        padded = dsp.ar_pad(x, 50)
        np.testing.assert_allclose(padded[-50:], np.sin(0.2 * np.arange(400, 450)), atol=1e-6)
        np.testing.assert_array_equal(padded[50:450], x)


class TestFastIca:
    def test_two_source_demixing(self):
        hits = sum(_matched_corr(dsp.fastica(_two_sources(s)[1], seed=s).sources,
                                 _two_sources(s)[0]) > 0.95 for s in range(20))
        assert hits >= 19

    def test_reconstruction_identity(self):
        _, X = _two_sources(3)
        m = dsp.fastica(X)
        xc = X - X.mean(axis=1, keepdims=True)
        assert np.linalg.norm(m.mixing @ m.sources - xc) / np.linalg.norm(xc) < 1e-6
        np.testing.assert_allclose(m.unmixing @ m.mixing, np.eye(2), atol=1e-10)

    def test_sources_white(self):
        _, X = _two_sources(4)
        s = dsp.fastica(X).sources
        np.testing.assert_allclose(s @ s.T / s.shape[1], np.eye(2), atol=1e-10)

    def test_seeded_determinism(self):
        _, X = _two_sources(5)
        assert dsp.fastica(X, seed=7).unmixing.tobytes() == dsp.fastica(X, seed=7).unmixing.tobytes()

    def test_single_channel(self):
        with pytest.raises(ValueError, match="2 channels"):
            dsp.fastica(np.ones((1, 100)))

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="10\\*C"):
            dsp.fastica(np.random.default_rng(0).normal(size=(4, 30)))

    def test_rank_deficient(self):
        row = np.random.default_rng(0).normal(size=200)
        with pytest.raises(ValueError, match="rank deficient"):
            dsp.fastica(np.vstack([row, 2 * row]))

    def test_non_convergence_carries_model(self):
        X = np.random.default_rng(0).normal(size=(6, 200))
        with pytest.raises(dsp.IcaConvergenceError) as info:
            dsp.fastica(X, max_iter=2, tol=1e-15)
        assert info.value.model is not None


class TestKurtosis:
    def test_gaussian(self):
        assert abs(dsp.excess_kurtosis(np.random.default_rng(0).normal(size=10 ** 6))) < 0.05

    def test_laplace(self):
        assert dsp.excess_kurtosis(np.random.default_rng(0).laplace(size=10 ** 6)) == pytest.approx(3.0, abs=0.1)

    def test_constant(self):
        with pytest.raises(ValueError, match="zero-variance"):
            dsp.excess_kurtosis(np.ones(10))

    def test_screen(self):
        rng = np.random.default_rng(1)
        S = np.vstack([rng.normal(size=5000), rng.laplace(size=5000)])
        out, zeroed = dsp.screen_components(S)
        assert zeroed == [0]
        np.testing.assert_array_equal(out[0], 0.0)
        np.testing.assert_array_equal(out[1], S[1])

    def test_screen_zero_threshold_keeps_super_gaussian(self):
        S = np.random.default_rng(2).laplace(size=(3, 5000))
        assert dsp.screen_components(S, 0.0)[1] == []

    def test_screen_negative_threshold(self):
        with pytest.raises(ValueError):
            dsp.screen_components(np.ones((1, 10)), -1.0)


class TestShrink:
    def test_branch_values(self):
        np.testing.assert_allclose(dsp.shrink([3.0, 0.5, -3.0], 1.0), [2.2092, 0.0, -2.2092], atol=1e-4)

    def test_nonpositive_threshold(self):
        with pytest.raises(ValueError):
            dsp.shrink([1.0], 0.0)

    @settings(max_examples=200, deadline=None)
    @given(c=st.floats(-50, 50), lam=st.floats(1e-3, 10))
    def test_odd_and_bounded(self, c, lam):
        a, b = dsp.shrink([c], lam)[0], dsp.shrink([-c], lam)[0]
        assert a == -b
        assert abs(a) <= abs(c)

    def test_continuous_at_threshold(self):
        lam = 1.3
        out = dsp.shrink([lam + 1e-9, -lam - 1e-9, lam, -lam], lam)
        np.testing.assert_allclose(out, 0.0, atol=1e-8)

    def test_universal_threshold(self):
        d = np.array([1.0, -1.0, 2.0, -2.0])
        assert dsp.universal_threshold(d, 100) == pytest.approx(1.5 / 0.6745 * np.sqrt(2 * np.log(100)))


class TestDenoise:
    def test_shape_and_rate_kept(self):
        x = np.random.default_rng(0).laplace(size=(4, 640))
        out = dsp.denoise(dsp.RawRecording(x, 160.0), dsp.FilterSpec())
        assert out.samples.shape == x.shape and out.rate == 160.0

    def test_degenerate_pipeline_is_filter(self):
        rng = np.random.default_rng(1)
        x = rng.laplace(size=(3, 640))
        rec = dsp.RawRecording(x, 160.0)
        spec = dsp.FilterSpec()
        filtered = dsp.frequency_filter(rec, spec).samples
        out = dsp.denoise(rec, spec, kurt_threshold=0.0, threshold=0.0).samples
        np.testing.assert_allclose(out, filtered, atol=1e-5)

    def test_single_channel(self):
        with pytest.raises(ValueError, match="2 channels"):
            dsp.denoise(dsp.RawRecording(np.ones((1, 640)), 160.0), dsp.FilterSpec())

    def test_preprocess_trials_independent(self):
        rng = np.random.default_rng(2)
        X = rng.laplace(size=(3, 4, 320))
        spec = dsp.FilterSpec()
        full = dsp.preprocess_trials(X, 160.0, spec)
        np.testing.assert_array_equal(full[1], dsp.preprocess_trials(X[1:2], 160.0, spec)[0])


class TestStandardize:
    def test_hand_example(self):
        np.testing.assert_allclose(dsp.standardize([[1.0, 2.0, 3.0]]), [[-1.2247449, 0.0, 1.2247449]], atol=1e-6)

    def test_idempotent(self):
        z = dsp.standardize(np.random.default_rng(0).normal(size=(3, 100)))
        np.testing.assert_allclose(dsp.standardize(z), z, atol=1e-12)

    def test_moments(self):
        z = dsp.standardize(np.random.default_rng(1).normal(5, 3, size=(8, 500)))
        assert np.all(np.abs(z.mean(axis=1)) < 1e-12)
        np.testing.assert_allclose(z.std(axis=1), 1.0, atol=1e-10)

    def test_constant_channel(self):
        with pytest.raises(ValueError, match="C3"):
            dsp.standardize([[1.0, 2.0], [4.0, 4.0]], ["C1", "C3"])
