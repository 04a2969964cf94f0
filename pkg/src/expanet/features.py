"""Per-channel EEG features and the 19 x 14 node-attribute matrix."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dsp import BANDS, BandSpec, Epoch, butterworth_bandpass
from .errors import DegenerateSignal, SingularFit, TooShort, ZeroVariance

FEATURE_NAMES = (
    "variance", "line_length", "mobility", "complexity", "kfd", "hfd", "dfa", "lzc",
    "perm_entropy", "bp_delta", "bp_theta", "bp_alpha", "bp_beta", "bp_gamma",
)
N_FEATURES = len(FEATURE_NAMES)
ENERGY_FLOOR = 1e-12


@dataclass(frozen=True)
class FeatureConfig:
    hfd_kmax: int = 10
    dfa_scales: tuple = (4, 8, 16, 32, 64)
    pe_order: int = 3
    pe_delay: int = 1
    bands: tuple = BANDS
    butter_order: int = 4

    def scales_for(self, n):
        return tuple(s for s in self.dfa_scales if s <= n // 4)

    def to_dict(self):
        return {"hfd_kmax": self.hfd_kmax, "dfa_scales": list(self.dfa_scales),
                "pe_order": self.pe_order, "pe_delay": self.pe_delay,
                "bands": [[b.name, b.low_hz, b.high_hz] for b in self.bands],
                "butter_order": self.butter_order}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "dfa_scales" in d:
            d["dfa_scales"] = tuple(d["dfa_scales"])
        if "bands" in d:
            d["bands"] = tuple(BandSpec(str(n), float(lo), float(hi)) for n, lo, hi in d["bands"])
        return cls(**d)


def _as_series(x, min_len, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{what} expects a 1-D series")
    if len(x) < min_len:
        raise TooShort(f"{what} needs at least {min_len} samples, got {len(x)}")
    return x


def _is_flat(var, x):
    scale = float(np.max(np.abs(x))) if len(x) else 0.0
    return var <= (1e-12 * scale) ** 2


def variance(x):
    x = _as_series(x, 2, "variance")
    d = x - x.mean()
    return float(np.mean(d * d))


def line_length(x):
    x = _as_series(x, 2, "line_length")
    return float(np.sum(np.abs(np.diff(x))))


def hjorth_mobility(x, fs=1.0):
    """sqrt(Var(dx/dt) / Var(x)), with dx/dt taken as the first difference times fs."""
    x = _as_series(x, 3, "hjorth_mobility")
    var_x = variance(x)
    if _is_flat(var_x, x):
        raise ZeroVariance("mobility of a constant signal is undefined")
    dx = np.diff(x) * fs
    return math.sqrt(variance(dx) / var_x)


def hjorth_complexity(x, fs=1.0):
    x = _as_series(x, 4, "hjorth_complexity")
    mob = hjorth_mobility(x, fs)
    dx = np.diff(x) * fs
    var_dx = variance(dx)
    if _is_flat(var_dx, dx):
        raise ZeroVariance("derivative has zero variance")
    if mob == 0.0:
        raise ZeroVariance("mobility is zero")
    return hjorth_mobility(dx, fs) / mob


def katz_fd(x):
    x = _as_series(x, 3, "katz_fd")
    L = float(np.sum(np.abs(np.diff(x))))
    d = float(np.max(np.abs(x - x[0])))
    if L == 0.0 or d == 0.0:
        raise DegenerateSignal("Katz FD needs a non-constant waveform")
    a = L / (len(x) - 1)
    return math.log10(L / a) / math.log10(d / a)


def higuchi_curve_lengths(x, k_max):
    """Mean normalized curve length L(k) for k = 1..k_max."""
    n = len(x)
    lengths = np.empty(k_max)
    for k in range(1, k_max + 1):
        # |x[t + k] - x[t]| belongs to the subseries starting at m = t mod k
        steps = np.abs(x[k:] - x[:-k])
        m = np.arange(len(steps)) % k
        per_m = np.bincount(m, weights=steps, minlength=k)
        n_m = np.bincount(m, minlength=k)
        lengths[k - 1] = np.mean(per_m * (n - 1) / (n_m * k) / k)
    return lengths


def higuchi_fd(x, k_max=10):
    x = _as_series(x, 2 * k_max, "higuchi_fd")
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    lengths = higuchi_curve_lengths(x, k_max)
    if np.any(lengths <= 0.0):
        raise DegenerateSignal("Higuchi curve length vanished")
    k = np.arange(1, k_max + 1, dtype=np.float64)
    slope = np.polyfit(np.log(1.0 / k), np.log(lengths), 1)[0]
    return float(slope)


def dfa_fluctuations(x, scales):
    """RMS residual of the linearly detrended profile, per window size."""
    y = np.cumsum(x - x.mean())
    out = np.empty(len(scales))
    for idx, n in enumerate(scales):
        w = len(y) // n
        seg = y[:w * n].reshape(w, n)
        t = np.arange(n, dtype=np.float64)
        tc = t - t.mean()
        centered = seg - seg.mean(axis=1, keepdims=True)
        slope = centered @ tc / np.dot(tc, tc)
        resid = centered - slope[:, None] * tc
        out[idx] = math.sqrt(np.mean(resid * resid))
    return out


def dfa_exponent(x, scales=(4, 8, 16, 32, 64)):
    scales = tuple(int(s) for s in scales)
    if len(scales) < 2 or min(scales) < 3:
        raise ValueError("DFA needs at least two window sizes, each >= 3")
    x = _as_series(x, 4 * max(scales), "dfa_exponent")
    fluct = dfa_fluctuations(x, scales)
    ok = fluct > 0.0
    if ok.sum() < 2:
        raise SingularFit("profile has no fluctuation after detrending")
    slope = np.polyfit(np.log(np.asarray(scales, float)[ok]), np.log(fluct[ok]), 1)[0]
    return float(slope)


def binarize(x):
    x = np.asarray(x, dtype=np.float64)
    return (x > np.median(x)).astype(np.uint8)


@njit(cache=True)
def _novel_phrases(s):
    n = s.shape[0]
    count = 0
    i = 0
    while i < n:
        # longest prefix of s[i:] reproducible from a start p < i (overlap allowed)
        best = 0
        for p in range(i):
            length = 0
            while i + length < n and s[p + length] == s[i + length]:
                length += 1
            if length > best:
                best = length
                if i + best >= n:
                    break
        if i + best >= n:
            break
        count += 1
        i += best + 1
    return count


def lzc_phrase_count(bits) -> int:
    """Number of novel phrases in the Lempel-Ziv (1976) exhaustive parsing.

    A phrase ends at the first symbol that makes it unreproducible from the
    preceding text (the copy source may overlap the phrase). A trailing
    remainder that is still a copy is not a novel phrase and is not counted.
    """
    return int(_novel_phrases(np.ascontiguousarray(bits, dtype=np.uint8)))


def lzc(x):
    x = _as_series(x, 2, "lzc")
    n = len(x)
    return lzc_phrase_count(binarize(x)) * math.log2(n) / n


def ordinal_patterns(x, order=3, delay=1):
    n_windows = len(x) - (order - 1) * delay
    idx = np.arange(n_windows)[:, None] + delay * np.arange(order)[None, :]
    ranks = np.argsort(x[idx], axis=1, kind="stable")
    return ranks @ (order ** np.arange(order))


def perm_entropy(x, order=3, delay=1):
    """Shannon entropy of ordinal patterns, normalized by log(order!)."""
    x = _as_series(x, (order - 1) * delay + 2, "perm_entropy")
    _, counts = np.unique(ordinal_patterns(x, order, delay), return_counts=True)
    p = counts / counts.sum()
    h = -np.sum(p * np.log(p))
    return float(min(max(h / math.log(math.factorial(order)), 0.0), 1.0))


def band_power(x, band: BandSpec, fs, order=4):
    """Natural-log energy of the zero-phase Butterworth band component."""
    x = np.asarray(x, dtype=np.float64)
    xb = butterworth_bandpass(x, band, fs, order)
    energy = np.sum(xb * xb, axis=-1)
    return np.log(np.maximum(energy, ENERGY_FLOOR))


@dataclass
class FeatureMatrix:
    values: np.ndarray                    # [19, 14]
    flags: np.ndarray                     # [19, 14] bool: sentinel substituted
    names: tuple = field(default=FEATURE_NAMES)


_SENTINEL_ERRORS = (ZeroVariance, DegenerateSignal, SingularFit)


def channel_features(x, fs, cfg: FeatureConfig = FeatureConfig()):
    """The 9 non-spectral features of one channel, plus their sentinel flags."""
    scales = cfg.scales_for(len(x))
    ops = (
        lambda: variance(x),
        lambda: line_length(x),
        lambda: hjorth_mobility(x, fs),
        lambda: hjorth_complexity(x, fs),
        lambda: katz_fd(x),
        lambda: higuchi_fd(x, cfg.hfd_kmax),
        lambda: dfa_exponent(x, scales),
        lambda: lzc(x),
        lambda: perm_entropy(x, cfg.pe_order, cfg.pe_delay),
    )
    values = np.zeros(len(ops))
    flags = np.zeros(len(ops), dtype=bool)
    for i, op in enumerate(ops):
        try:
            values[i] = op()
        except _SENTINEL_ERRORS:
            flags[i] = True
    return values, flags


def extract_features(epoch: Epoch, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    data = np.asarray(epoch.data, dtype=np.float64)
    fs = epoch.sample_rate_hz
    n_ch = data.shape[0]
    values = np.zeros((n_ch, N_FEATURES))
    flags = np.zeros((n_ch, N_FEATURES), dtype=bool)
    for c in range(n_ch):
        values[c, :9], flags[c, :9] = channel_features(data[c], fs, cfg)
    for b, band in enumerate(cfg.bands):
        values[:, 9 + b] = band_power(data, band, fs, cfg.butter_order)
    return FeatureMatrix(values=values, flags=flags)


class FeatureScaler:
    """Per-feature z-score with statistics from training graphs only."""

    def __init__(self, mean=None, std=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    def fit(self, matrices):
        stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in matrices], axis=0)
        self.mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)
        return self

    def transform(self, matrix):
        if self.mean is None:
            raise RuntimeError("FeatureScaler used before fit")
        return (np.asarray(matrix, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


__all__ = [
    "FEATURE_NAMES", "N_FEATURES", "FeatureConfig", "FeatureMatrix", "FeatureScaler",
    "variance", "line_length", "hjorth_mobility", "hjorth_complexity", "katz_fd",
    "higuchi_fd", "dfa_exponent", "lzc", "lzc_phrase_count", "binarize", "perm_entropy",
    "band_power", "extract_features", "channel_features",
]
