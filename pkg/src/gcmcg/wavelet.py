"""Daubechies-4 discrete wavelet transform (pyramidal, orthogonal filter bank)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# db4 (four vanishing moments, eight taps) analysis low-pass filter.
DB4_DEC_LO = np.array([
    -0.010597401784997278,
    0.032883011666982945,
    0.030841381835986965,
    -0.18703481171888114,
    -0.02798376941698385,
    0.6308807679295904,
    0.7148465705525415,
    0.23037781330885523,
])
DB4_DEC_HI = np.array([(-1) ** (k + 1) * DB4_DEC_LO[len(DB4_DEC_LO) - 1 - k]
                       for k in range(len(DB4_DEC_LO))])
FILTER_LEN = len(DB4_DEC_LO)

MODES = ("periodic", "symmetric")


@dataclass
class WaveletDecomposition:
    approx: np.ndarray
    details: list  # finest level first
    levels: int
    boundary: str
    lengths: list = field(default_factory=list)  # input length at each level


def max_level(n: int) -> int:
    """Deepest useful level: floor(log2(n / (L - 1))), never negative."""
    if n < FILTER_LEN - 1:
        return 0
    return int(math.floor(math.log2(n / (FILTER_LEN - 1))))


def _positions(n_out: int):
    # p[o, j] = 2o + 1 - j  (downsampled convolution, odd phase)
    return 2 * np.arange(n_out)[:, None] + 1 - np.arange(FILTER_LEN)[None, :]


def _symmetric_index(p, n):
    p = np.where(p < 0, -p - 1, p)
    return np.where(p >= n, 2 * n - p - 1, p)


def _analysis(x, mode):
    n = len(x)
    if mode == "periodic":
        if n % 2:
            x = np.append(x, x[-1])
            n += 1
        pos = _positions(n // 2) % n
    else:
        pos = _symmetric_index(_positions((n + FILTER_LEN - 1) // 2), n)
    block = x[pos]
    return block @ DB4_DEC_LO, block @ DB4_DEC_HI


def _synthesis(ca, cd, n, mode):
    pos = _positions(len(ca))
    contrib = ca[:, None] * DB4_DEC_LO[None, :] + cd[:, None] * DB4_DEC_HI[None, :]
    if mode == "periodic":
        n_even = n + (n % 2)
        out = np.zeros(n_even)
        np.add.at(out, (pos % n_even).ravel(), contrib.ravel())
        return out[:n]
    keep = (pos >= 0) & (pos < n)
    out = np.zeros(n)
    np.add.at(out, pos[keep], contrib[keep])
    return out


def dwt(signal, levels: int, mode: str = "periodic") -> WaveletDecomposition:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"dwt expects a 1-D signal, got shape {x.shape}")
    if mode not in MODES:
        raise ValueError(f"unknown boundary mode {mode!r}; choose from {MODES}")
    top = max_level(len(x))
    if levels < 1 or levels > top:
        raise ValueError(f"infeasible db4 decomposition: levels={levels} for length {len(x)} "
                         f"(max {top})")
    details, lengths = [], []
    approx = x
    for _ in range(levels):
        lengths.append(len(approx))
        approx, detail = _analysis(approx, mode)
        details.append(detail)
    return WaveletDecomposition(approx=approx, details=details, levels=levels,
                                boundary=mode, lengths=lengths)


def idwt(dec: WaveletDecomposition) -> np.ndarray:
    approx = dec.approx
    for detail, n in zip(reversed(dec.details), reversed(dec.lengths)):
        approx = _synthesis(approx, detail, n, dec.boundary)
    return approx
