"""Two-stage EEG denoising: frequency filtering, then ICA with wavelet shrinkage."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from .wavelet import dwt, idwt, max_level

log = logging.getLogger(__name__)

SHRINK_SCALE = 1.5


class IcaConvergenceError(RuntimeError):
    """Raised when the fixed point is not reached; ``model`` holds the last iterate."""

    def __init__(self, iterations, residual, model=None):
        super().__init__(f"FastICA did not converge in {iterations} iterations "
                         f"(last residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual
        self.model = model


@dataclass
class RawRecording:
    samples: np.ndarray  # (C, S)
    rate: float
    channel_names: list = field(default_factory=list)
    subject_id: str = "0"
    label: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError(f"recording must be a C x S matrix, got {self.samples.shape}")
        if not self.rate > 0:
            raise ValueError(f"sampling rate must be positive, got {self.rate}")
        if not self.channel_names:
            self.channel_names = [f"ch{i + 1}" for i in range(self.samples.shape[0])]
        if len(self.channel_names) != self.samples.shape[0]:
            raise ValueError("channel_names length does not match channel count")


@dataclass(frozen=True)
class FilterSpec:
    band_low_hz: float = 0.2
    band_high_hz: float = 75.0
    notch_hz: float | None = 60.0
    order: int = 4
    notch_q: float = 30.0

    def validate(self, rate):
        nyq = rate / 2.0
        if not 0 < self.band_low_hz < self.band_high_hz < nyq:
            raise ValueError(f"band edges must satisfy 0 < {self.band_low_hz} < "
                             f"{self.band_high_hz} < Nyquist {nyq}")
        if self.notch_hz is not None and not 0 < self.notch_hz < nyq:
            raise ValueError(f"notch {self.notch_hz} Hz must lie below Nyquist {nyq}")
        if self.order < 1:
            raise ValueError("filter order must be >= 1")


@dataclass
class IcaModel:
    mixing: np.ndarray
    unmixing: np.ndarray
    sources: np.ndarray
    mean: np.ndarray
    n_iter: int = 0
    seed: int = 0


def burg_ar(x, order):
    """Burg estimate of AR coefficients ``a`` (a[0] == 1); the model is always stable."""
    x = np.asarray(x, dtype=np.float64)
    f, b = x[1:].copy(), x[:-1].copy()
    a = np.array([1.0])
    for _ in range(order):
        den = f @ f + b @ b
        k = 0.0 if den == 0 else -2.0 * (f @ b) / den
        a = np.append(a, 0.0)
        a = a + k * a[::-1]
        f, b = (f + k * b)[1:], (b + k * f)[:-1]
    return a


def _extrapolate(x, n, order):
    a = burg_ar(x, order)
    zi = sps.lfiltic([1.0], a, x[::-1][:order])
    ahead, _ = sps.lfilter([1.0], a, np.zeros(n), zi=zi)
    return ahead


def ar_pad(x, n, order=16):
    """Extend a 1-D signal by ``n`` AR-predicted samples on each side."""
    order = max(1, min(order, len(x) // 4))
    right = _extrapolate(x, n, order)
    left = _extrapolate(x[::-1], n, order)[::-1]
    return np.concatenate([left, x, right])


def _zero_phase(x, sos, pad):
    # AR-extrapolated padding keeps edge transients out of short trials.
    x = np.atleast_2d(x)
    padded = np.vstack([ar_pad(row, pad) for row in x])
    return sps.sosfiltfilt(sos, padded, axis=-1, padlen=0)[:, pad:pad + x.shape[1]]


def _pad_length(rate, spec):
    return max(int(math.ceil(rate / spec.band_low_hz)), 3 * (2 * spec.order + 1))


def notch_stage(x, rate, spec: FilterSpec):
    if spec.notch_hz is None:
        return np.array(x, dtype=np.float64)
    b, a = sps.iirnotch(spec.notch_hz, spec.notch_q, fs=rate)
    return _zero_phase(np.asarray(x, dtype=np.float64), sps.tf2sos(b, a), _pad_length(rate, spec))


def bandpass_stage(x, rate, spec: FilterSpec):
    sos = sps.butter(spec.order, [spec.band_low_hz, spec.band_high_hz], btype="bandpass",
                     fs=rate, output="sos")
    return _zero_phase(np.asarray(x, dtype=np.float64), sos, _pad_length(rate, spec))


def frequency_filter(x: RawRecording, spec: FilterSpec) -> RawRecording:
    """Notch then Butterworth band-pass, each applied forward and backward."""
    spec.validate(x.rate)
    min_len = 2 * spec.order
    if x.samples.shape[1] < min_len:
        raise ValueError(f"recording has {x.samples.shape[1]} samples; need >= {min_len}")
    out = bandpass_stage(notch_stage(x.samples, x.rate, spec), x.rate, spec)
    return replace(x, samples=out)


def _sym_decorrelate(w):
    d, e = np.linalg.eigh(w @ w.T)
    return (e * (1.0 / np.sqrt(d))) @ e.T @ w


def fastica(X, max_iter=500, tol=1e-6, seed=0) -> IcaModel:
    """Symmetric FastICA with the tanh contrast on centred, whitened data."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"fastica expects a C x S matrix, got {X.shape}")
    c, s = X.shape
    if c < 2:
        raise ValueError(f"fastica needs at least 2 channels, got {c}")
    if s < 10 * c:
        raise ValueError(f"fastica needs S >= 10*C samples ({10 * c}), got {s}")
    mean = X.mean(axis=1, keepdims=True)
    xc = X - mean
    evals, evecs = np.linalg.eigh(xc @ xc.T / s)
    if evals.min() <= 1e-12 * max(evals.max(), 1e-300):
        raise ValueError(f"fastica: centred data is rank deficient (eigenvalues {evals})")
    whiten = (evecs / np.sqrt(evals)) @ evecs.T
    dewhiten = (evecs * np.sqrt(evals)) @ evecs.T
    xw = whiten @ xc

    rng = np.random.default_rng(seed)
    w = _sym_decorrelate(rng.normal(size=(c, c)))
    residual = np.inf
    for it in range(1, max_iter + 1):
        g = np.tanh(w @ xw)
        w_new = g @ xw.T / s - (1.0 - g * g).mean(axis=1)[:, None] * w
        w_new = _sym_decorrelate(w_new)
        residual = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        w = w_new
        if residual < tol:
            break
    unmixing = w @ whiten
    model = IcaModel(mixing=dewhiten @ w.T, unmixing=unmixing, sources=unmixing @ xc,
                     mean=mean, n_iter=it, seed=seed)
    if residual >= tol:
        raise IcaConvergenceError(max_iter, residual, model)
    return model


def excess_kurtosis(s) -> float:
    s = np.asarray(s, dtype=np.float64)
    if s.size < 4:
        raise ValueError("kurtosis needs at least 4 samples")
    d = s - s.mean()
    var = np.mean(d * d)
    if var <= 0:
        raise ValueError("kurtosis undefined for zero-variance input")
    return float(np.mean(d ** 4) / var ** 2 - 3.0)


def screen_components(S, threshold=0.5):
    """Zero every row whose excess kurtosis is below ``threshold``."""
    if threshold < 0:
        raise ValueError("kurtosis threshold must be >= 0")
    S = np.array(S, dtype=np.float64)
    zeroed = [i for i, row in enumerate(S) if excess_kurtosis(row) < threshold]
    S[zeroed] = 0.0
    return S, zeroed


def shrink(cd, threshold):
    """Exponential shrinkage: dead zone inside +-threshold, smooth decay to identity outside."""
    if not threshold > 0:
        raise ValueError("shrink threshold must be positive")
    c = np.asarray(cd, dtype=np.float64)
    out = np.zeros_like(c)
    hi = c > threshold
    lo = c < -threshold
    out[hi] = c[hi] * (1.0 - np.exp((threshold - c[hi]) / SHRINK_SCALE))
    out[lo] = (-c[lo]) * (np.exp((threshold + c[lo]) / SHRINK_SCALE) - 1.0)
    return out


def universal_threshold(finest_detail, n):
    sigma = np.median(np.abs(finest_detail)) / 0.6745
    return sigma * math.sqrt(2.0 * math.log(n))


def wavelet_denoise(s, levels=None, mode="periodic", threshold=None):
    s = np.asarray(s, dtype=np.float64)
    n = len(s)
    top = max_level(n)
    lv = min(int(math.floor(math.log2(n))), top) if levels is None else levels
    dec = dwt(s, lv, mode)
    lam = universal_threshold(dec.details[0], n) if threshold is None else threshold
    if not lam > 0:
        return s.copy()
    dec.details = [shrink(d, lam) for d in dec.details]
    return idwt(dec)


def denoise(x: RawRecording, spec: FilterSpec, kurt_threshold=0.5, levels=None,
            mode="periodic", threshold=None, ica_seed=0, max_iter=500, tol=1e-6,
            strict_ica=False) -> RawRecording:
    """Full hybrid pipeline; output has the input's shape and rate.

    Near-Gaussian noise subspaces have no preferred rotation, so FastICA
    often stops short of ``tol`` on real trials. Unless ``strict_ica`` is
    set, the last (still orthogonal) iterate is used and the event logged.
    """
    filtered = frequency_filter(x, spec)
    try:
        ica = fastica(filtered.samples, max_iter=max_iter, tol=tol, seed=ica_seed)
    except IcaConvergenceError as exc:
        if strict_ica or exc.model is None:
            raise
        log.info("subject %s: %s; using last iterate", x.subject_id, exc)
        ica = exc.model
    kept, zeroed = screen_components(ica.sources, kurt_threshold)
    if zeroed:
        log.debug("zeroed %d of %d components", len(zeroed), len(kept))
    cleaned = np.vstack([
        row if i in zeroed else wavelet_denoise(row, levels, mode, threshold)
        for i, row in enumerate(kept)
    ])
    return replace(x, samples=ica.mixing @ cleaned + ica.mean)


def standardize(X, channel_names=None):
    """Per-channel mean removal and division by the population standard deviation."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    bad = np.flatnonzero(sd[:, 0] == 0)
    if bad.size:
        name = channel_names[bad[0]] if channel_names else f"index {bad[0]}"
        raise ValueError(f"cannot standardize zero-variance channel {name}")
    return (X - mu) / sd


def preprocess_trials(samples, rate, spec: FilterSpec, kurt_threshold=0.5, levels=None,
                      mode="periodic", ica_seed=0, standardize_output=True):
    """Denoise and standardise each trial on its own, so no statistics cross trials."""
    out = np.empty(np.shape(samples), dtype=np.float64)
    for i, x in enumerate(samples):
        rec = denoise(RawRecording(x, rate), spec, kurt_threshold, levels, mode, ica_seed=ica_seed)
        out[i] = standardize(rec.samples) if standardize_output else rec.samples
    return out
