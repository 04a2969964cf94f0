"""Filtering, analytic phase, epoching and normalization.

Every function here is pure and works on float64 numpy arrays. Filters accept
either a 1-D series or a ``[channels, samples]`` matrix and always act along
the last axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from .errors import InvalidBand, InvalidCenter, TooShortSignal, UnstableDesign
from .io import Recording

__all__ = [
    "BandSpec", "BANDS", "Epoch", "fir_bandpass", "notch_filter",
    "butterworth_bandpass", "butterworth_sos", "hilbert_phase",
    "segment_epochs", "zscore", "preprocess_recording", "epoch_length",
]


@dataclass(frozen=True)
class BandSpec:
    name: str
    low_hz: float
    high_hz: float

    def validate(self, sample_rate_hz: float) -> None:
        if not (0.0 < self.low_hz < self.high_hz < sample_rate_hz / 2.0):
            raise InvalidBand(
                f"band {self.name} [{self.low_hz}, {self.high_hz}] Hz invalid "
                f"for fs={sample_rate_hz}")


BANDS = (
    BandSpec("delta", 0.5, 4.0),
    BandSpec("theta", 4.0, 8.0),
    BandSpec("alpha", 8.0, 13.0),
    BandSpec("beta", 13.0, 22.0),
    BandSpec("gamma", 22.0, 30.0),
)


@dataclass
class Epoch:
    subject_id: str
    label: int
    sample_rate_hz: float
    data: np.ndarray  # [19, n_t], z-scored per channel
    segment_index: int


def _check_band(low_hz, high_hz, sample_rate_hz):
    if not (0.0 < low_hz < high_hz < sample_rate_hz / 2.0):
        raise InvalidBand(
            f"need 0 < low < high < Nyquist, got low={low_hz}, high={high_hz}, "
            f"fs={sample_rate_hz}")


def default_fir_taps(sample_rate_hz: float) -> int:
    """Next odd integer >= fs, i.e. a kernel of about one second."""
    n = int(math.ceil(sample_rate_hz))
    return n if n % 2 == 1 else n + 1


@lru_cache(maxsize=64)
def _fir_kernel(low_hz, high_hz, sample_rate_hz, n_taps):
    # Difference of two unit-DC Hamming lowpasses: the DC gain is exactly zero,
    # which a one-second kernel could not otherwise reach for a 0.1 Hz edge.
    lp_high = sps.firwin(n_taps, high_hz, window="hamming", fs=sample_rate_hz)
    lp_low = sps.firwin(n_taps, low_hz, window="hamming", fs=sample_rate_hz)
    return lp_high - lp_low


def fir_bandpass(x, low_hz=0.1, high_hz=70.0, sample_rate_hz=256.0, n_taps=None):
    """Linear-phase windowed-sinc bandpass with zero group delay.

    The signal is edge-padded by ``(n_taps - 1) / 2`` samples on both sides and
    convolved in ``valid`` mode, so the output is aligned with, and as long as,
    the input.
    """
    _check_band(low_hz, high_hz, sample_rate_hz)
    if n_taps is None:
        n_taps = default_fir_taps(sample_rate_hz)
    if n_taps < 3 or n_taps % 2 == 0:
        raise InvalidBand(f"n_taps must be odd and >= 3, got {n_taps}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < n_taps:
        raise TooShortSignal(f"signal length {x.shape[-1]} < n_taps {n_taps}")
    h = _fir_kernel(float(low_hz), float(high_hz), float(sample_rate_hz), int(n_taps))
    half = (n_taps - 1) // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    xp = np.pad(x, pad, mode="edge")
    kernel = h.reshape((1,) * (x.ndim - 1) + (-1,))
    return sps.fftconvolve(xp, kernel, mode="valid", axes=-1)


def notch_filter(x, center_hz=50.0, sample_rate_hz=256.0, q=30.0):
    """Second-order IIR notch applied forward-backward."""
    if not (0.0 < center_hz < sample_rate_hz / 2.0):
        raise InvalidCenter(f"notch center {center_hz} Hz not below Nyquist "
                            f"{sample_rate_hz / 2.0} Hz")
    b, a = sps.iirnotch(center_hz, q, fs=sample_rate_hz)
    return sps.filtfilt(b, a, np.asarray(x, dtype=np.float64), axis=-1)


def _zero_phase_edges(low_hz, high_hz, sample_rate_hz, order):
    """Design edges whose squared (forward-backward) response is -3 dB at the
    requested band edges.

    A single Butterworth pass is -3 dB at its design edges, so running it twice
    would put the edges at -6 dB. In the analog prototype the zero-phase
    response is -3 dB where ``x**(2*order) = sqrt(2) - 1``; widening the
    bilinear-prewarped bandwidth by ``1/x`` about the same geometric center
    moves those points onto the requested edges.
    """
    fs = sample_rate_hz
    w1 = 2.0 * fs * math.tan(math.pi * low_hz / fs)
    w2 = 2.0 * fs * math.tan(math.pi * high_hz / fs)
    x = (math.sqrt(2.0) - 1.0) ** (1.0 / (2 * order))
    bw = (w2 - w1) / x
    w0sq = w1 * w2
    w2n = 0.5 * (bw + math.sqrt(bw * bw + 4.0 * w0sq))
    w1n = w0sq / w2n
    f1 = fs / math.pi * math.atan(w1n / (2.0 * fs))
    f2 = fs / math.pi * math.atan(w2n / (2.0 * fs))
    return f1, f2


@lru_cache(maxsize=128)
def butterworth_sos(low_hz, high_hz, sample_rate_hz, order=4):
    """Second-order sections of the zero-phase-corrected Butterworth bandpass."""
    _check_band(low_hz, high_hz, sample_rate_hz)
    f1, f2 = _zero_phase_edges(low_hz, high_hz, sample_rate_hz, order)
    if not (0.0 < f1 < f2 < sample_rate_hz / 2.0):
        raise InvalidBand(
            f"band [{low_hz}, {high_hz}] too close to Nyquist for a zero-phase design")
    sos = sps.butter(order, [f1, f2], btype="bandpass", fs=sample_rate_hz, output="sos")
    for section in sos:
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0):
            raise UnstableDesign(f"pole magnitude {np.abs(poles).max():.6f} >= 1")
    sos.setflags(write=False)
    return sos


@lru_cache(maxsize=128)
def _settling_samples(low_hz, high_hz, sample_rate_hz, order, tol=1e-13):
    """Samples until the impulse response stays below ``tol`` of its peak."""
    sos = butterworth_sos(low_hz, high_hz, sample_rate_hz, order).copy()
    n = 1024
    while True:
        impulse = np.zeros(n)
        impulse[0] = 1.0
        h = np.abs(sps.sosfilt(sos, impulse))
        above = np.nonzero(h > tol * h.max())[0]
        if above[-1] < n // 2:
            return int(above[-1]) + 1
        n *= 2


def butterworth_bandpass(x, band: BandSpec, sample_rate_hz, order=4):
    """Zero-phase (forward-backward) Butterworth bandpass along the last axis.

    Each edge is extended by its own constant value. The forward pass starts
    in the steady state of the first sample, which is the same as an
    infinitely long constant past; the trailing constant runs until the
    forward response has died out, so the backward pass starts at rest. The
    result is the forward-backward filter of the constant-extended signal,
    which treats both ends alike: filtering a time-reversed input returns the
    time-reversed output.
    """
    band.validate(sample_rate_hz)
    key = (float(band.low_hz), float(band.high_hz), float(sample_rate_hz), int(order))
    # the cached design is read-only; the Cython filter wants a writable buffer
    sos = butterworth_sos(*key).copy()
    pad = _settling_samples(*key)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    ext = np.concatenate([x, np.repeat(x[..., -1:], pad, axis=-1)], axis=-1)
    zi = sps.sosfilt_zi(sos)                        # [sections, 2], unit-step steady state
    zi_shape = (sos.shape[0],) + x.shape[:-1] + (2,)
    zi_b = zi.reshape((sos.shape[0],) + (1,) * (x.ndim - 1) + (2,))
    fwd, _ = sps.sosfilt(sos, ext, axis=-1,
                         zi=np.broadcast_to(zi_b * x[..., :1][None], zi_shape).copy())
    rev = fwd[..., ::-1]
    bwd, _ = sps.sosfilt(sos, rev, axis=-1,
                         zi=np.broadcast_to(zi_b * rev[..., :1][None], zi_shape).copy())
    return np.ascontiguousarray(bwd[..., ::-1][..., :n])


def hilbert_phase(x):
    """Instantaneous phase of the analytic signal, in (-pi, pi].

    The analytic signal uses the full-length FFT: positive frequencies doubled,
    negative ones zeroed, DC (and Nyquist for even lengths) kept once.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 8:
        raise TooShortSignal(f"need at least 8 samples, got {n}")
    spec = np.fft.fft(x, axis=-1)
    weights = np.zeros(n)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[n // 2] = 1.0
        weights[1:n // 2] = 2.0
    else:
        weights[1:(n + 1) // 2] = 2.0
    analytic = np.fft.ifft(spec * weights, axis=-1)
    phase = np.angle(analytic)
    phase[phase <= -np.pi] = np.pi
    return phase


def zscore(data):
    """Per-channel (last axis) z-score with population std.

    Constant channels map to zeros instead of dividing by zero.
    """
    data = np.asarray(data, dtype=np.float64)
    mean = data.mean(axis=-1, keepdims=True)
    centered = data - mean
    std = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True))
    flat = std <= 1e-12 * (1.0 + np.abs(mean))
    safe = np.where(flat, 1.0, std)
    return np.where(flat, 0.0, centered / safe)


def epoch_length(sample_rate_hz, epoch_s=5.0):
    return int(math.floor(epoch_s * sample_rate_hz + 0.5))


def segment_epochs(rec: Recording, epoch_s=5.0, overlap=0.5):
    """Slide a fixed window over the recording and z-score every window.

    Epoch ``k`` covers samples ``[k * hop, k * hop + n_t)``; a trailing partial
    window is dropped.
    """
    if not (0.0 <= overlap < 1.0):
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    n_t = epoch_length(rec.sample_rate_hz, epoch_s)
    hop = max(1, int(math.floor(n_t * (1.0 - overlap))))
    n_samples = rec.data.shape[1]
    if n_samples < n_t:
        raise TooShortSignal(
            f"recording of {n_samples} samples shorter than one epoch ({n_t})")
    count = (n_samples - n_t) // hop + 1
    return [
        Epoch(subject_id=rec.subject_id, label=rec.label,
              sample_rate_hz=rec.sample_rate_hz,
              data=zscore(rec.data[:, k * hop:k * hop + n_t]), segment_index=k)
        for k in range(count)
    ]


def preprocess_recording(rec: Recording, low_hz=0.1, high_hz=70.0,
                         notch_hz=50.0, notch_q=30.0, n_taps=None) -> Recording:
    """Broadband FIR bandpass followed by the mains notch, channel-wise."""
    data = fir_bandpass(rec.data, low_hz, high_hz, rec.sample_rate_hz, n_taps)
    data = notch_filter(data, notch_hz, rec.sample_rate_hz, notch_q)
    return Recording(subject_id=rec.subject_id, label=rec.label,
                     sample_rate_hz=rec.sample_rate_hz,
                     channel_names=list(rec.channel_names), data=data)
