import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal as sps

from expanet import dsp
from expanet.errors import InvalidBand, InvalidCenter, TooShortSignal
from expanet.io import Recording

FS = 256.0


def tone(freq, seconds=5.0, fs=FS, phase=0.0):
    t = np.arange(int(seconds * fs)) / fs
    return np.sin(2 * np.pi * freq * t + phase)


def rms(x):
    return float(np.sqrt(np.mean(x * x)))


def steady(x, fs=FS, margin_s=1.0):
    m = int(margin_s * fs)
    return x[..., m:-m]


# -- FIR bandpass ---------------------------------------------------------------

def test_fir_preserves_10hz():
    x = tone(10.0)
    y = dsp.fir_bandpass(x, 0.1, 70.0, FS)
    assert y.shape == x.shape
    assert abs(rms(steady(y)) / rms(steady(x)) - 1.0) < 0.01


def test_fir_removes_dc():
    y = dsp.fir_bandpass(np.full(1280, 5.0), 0.1, 70.0, FS)
    assert np.max(np.abs(y)) < 0.05 * 5.0


def test_fir_attenuates_100hz_by_40db():
    x = tone(100.0)
    y = dsp.fir_bandpass(x, 0.1, 70.0, FS)
    assert 20 * math.log10(rms(steady(y)) / rms(steady(x))) <= -40.0


def test_fir_kernel_dc_and_nyquist_stopband():
    n_taps = dsp.default_fir_taps(FS)
    assert n_taps % 2 == 1 and n_taps >= FS
    kernel = dsp._fir_kernel(0.1, 70.0, FS, n_taps)
    w, h = sps.freqz(kernel, worN=[0.0, np.pi])
    gains_db = 20 * np.log10(np.maximum(np.abs(h), 1e-300))
    assert np.all(gains_db <= -40.0)


def test_fir_errors():
    with pytest.raises(InvalidBand):
        dsp.fir_bandpass(np.zeros(1000), 30.0, 10.0, FS)
    with pytest.raises(InvalidBand):
        dsp.fir_bandpass(np.zeros(1000), 0.1, 200.0, FS)
    with pytest.raises(TooShortSignal):
        dsp.fir_bandpass(np.zeros(100), 0.1, 70.0, FS)


def test_fir_matrix_rows_match_single_channel(rng):
    x = rng.standard_normal((3, 1000))
    y = dsp.fir_bandpass(x, 0.1, 70.0, FS)
    for c in range(3):
        assert np.allclose(y[c], dsp.fir_bandpass(x[c], 0.1, 70.0, FS), atol=1e-12)


# -- notch ----------------------------------------------------------------------

def test_notch_kills_50hz_keeps_10hz():
    assert rms(steady(dsp.notch_filter(tone(50.0), 50.0, FS))) <= 0.03 * rms(tone(50.0))
    kept = rms(steady(dsp.notch_filter(tone(10.0), 50.0, FS))) / rms(steady(tone(10.0)))
    assert abs(kept - 1.0) < 0.05


def test_notch_response_spec():
    b, a = sps.iirnotch(50.0, 30.0, fs=FS)
    _, h = sps.freqz(b, a, worN=[40.0, 50.0, 60.0], fs=FS)
    zero_phase_db = 20 * np.log10(np.maximum(np.abs(h) ** 2, 1e-300))
    assert zero_phase_db[1] <= -30.0
    assert np.all(np.abs(zero_phase_db[[0, 2]]) < 1.0)


def test_notch_zero_and_invalid_center():
    assert np.array_equal(dsp.notch_filter(np.zeros(600), 50.0, FS), np.zeros(600))
    with pytest.raises(InvalidCenter):
        dsp.notch_filter(np.zeros(600), 130.0, FS)


# -- Butterworth ------------------------------------------------------------------

def band(name):
    return next(b for b in dsp.BANDS if b.name == name)


def test_canonical_bands():
    edges = {b.name: (b.low_hz, b.high_hz) for b in dsp.BANDS}
    assert edges == {"delta": (0.5, 4.0), "theta": (4.0, 8.0), "alpha": (8.0, 13.0),
                     "beta": (13.0, 22.0), "gamma": (22.0, 30.0)}


def test_butterworth_alpha_passes_10hz():
    x = tone(10.0, seconds=10.0)
    y = dsp.butterworth_bandpass(x, band("alpha"), FS)
    assert abs(20 * math.log10(rms(steady(y, margin_s=2)) / rms(steady(x, margin_s=2)))) <= 0.5


def test_butterworth_delta_rejects_10hz():
    x = tone(10.0, seconds=10.0)
    y = dsp.butterworth_bandpass(x, band("delta"), FS)
    assert 20 * math.log10(rms(steady(y, margin_s=2)) / rms(steady(x, margin_s=2))) <= -24.0


@pytest.mark.parametrize("b", dsp.BANDS, ids=lambda b: b.name)
def test_butterworth_minus3db_at_edges(b):
    """Forward-backward magnitude |H|^2 crosses -3 dB within 5% of each edge."""
    sos = dsp.butterworth_sos(b.low_hz, b.high_hz, FS, 4).copy()
    freqs = np.linspace(0.01, 60.0, 600001)
    _, h = sps.sosfreqz(sos, worN=freqs, fs=FS)
    db = 20 * np.log10(np.abs(h) ** 2)
    above = freqs[db >= -3.0]
    lo, hi = above.min(), above.max()
    assert abs(lo - b.low_hz) <= 0.05 * b.low_hz
    assert abs(hi - b.high_hz) <= 0.05 * b.high_hz
    assert len(sos) == 4            # cascaded second-order sections


def test_butterworth_impulse_decays():
    x = np.zeros(2560)
    x[1280] = 1.0
    y = dsp.butterworth_bandpass(x, band("theta"), FS)
    assert np.all(np.isfinite(y))
    assert np.max(np.abs(y[:100])) < 1e-6 * np.max(np.abs(y))
    assert np.max(np.abs(y[-100:])) < 1e-6 * np.max(np.abs(y))


def test_butterworth_time_reversal(rng):
    x = rng.standard_normal((4, 1280))
    for b in dsp.BANDS:
        y = dsp.butterworth_bandpass(x, b, FS)
        y_rev = dsp.butterworth_bandpass(x[:, ::-1], b, FS)
        assert np.allclose(y_rev[:, ::-1], y, atol=1e-10 * np.abs(y).max())


def test_butterworth_invalid_band():
    with pytest.raises(InvalidBand):
        dsp.butterworth_bandpass(np.zeros(512), dsp.BandSpec("bad", 50.0, 140.0), FS)


# -- linearity -----------------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 600, elements=finite), arrays(np.float64, 600, elements=finite),
       finite, finite)
def test_filters_are_linear(x, y, a, b):
    for f in (lambda s: dsp.fir_bandpass(s, 0.1, 70.0, FS),
              lambda s: dsp.notch_filter(s, 50.0, FS),
              lambda s: dsp.butterworth_bandpass(s, band("alpha"), FS)):
        lhs = f(a * x + b * y)
        rhs = a * f(x) + b * f(y)
        scale = max(1.0, np.abs(lhs).max(), np.abs(a * f(x)).max(), np.abs(b * f(y)).max())
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


# -- Hilbert phase -----------------------------------------------------------------

def test_hilbert_phase_slope():
    fs = 256.0
    t = np.arange(1280) / fs
    phase = np.unwrap(dsp.hilbert_phase(np.cos(2 * np.pi * 10 * t)))
    inner = slice(128, 1152)
    slope = np.polyfit(t[inner], phase[inner], 1)[0]
    assert abs(slope - 2 * np.pi * 10) < 0.01 * 2 * np.pi * 10


def test_hilbert_negation_shifts_by_pi(rng):
    x = rng.standard_normal(500)
    d = dsp.hilbert_phase(-x) - dsp.hilbert_phase(x)
    assert np.allclose(np.cos(d), -1.0, atol=1e-9)


def test_hilbert_sin_lags_cos_by_quarter_cycle():
    t = np.arange(1280) / FS
    d = dsp.hilbert_phase(np.cos(2 * np.pi * 7 * t)) - dsp.hilbert_phase(np.sin(2 * np.pi * 7 * t))
    d = np.angle(np.exp(1j * d))[128:-128]
    assert abs(np.median(d) - np.pi / 2) < 1e-3


def test_hilbert_matches_spectral_oracle(rng):
    # analytic signal by the same recipe, built independently with an explicit loop
    for n in (64, 65):
        x = rng.standard_normal(n)
        spec = np.fft.fft(x)
        weights = np.zeros(n)
        weights[0] = 1.0
        for k in range(1, n):
            if 2 * k < n:
                weights[k] = 2.0
            elif 2 * k == n:
                weights[k] = 1.0
        z = np.fft.ifft(spec * weights)
        expected = np.angle(z)
        expected[expected <= -np.pi] = np.pi
        assert np.allclose(np.exp(1j * dsp.hilbert_phase(x)), np.exp(1j * expected), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(8, 300), elements=finite))
def test_hilbert_range(x):
    p = dsp.hilbert_phase(x)
    assert np.all(p > -np.pi) and np.all(p <= np.pi)


def test_hilbert_too_short():
    with pytest.raises(TooShortSignal):
        dsp.hilbert_phase(np.ones(7))


# -- epochs and z-score -------------------------------------------------------------

def rec_of(seconds, fs, rng):
    return Recording("S", 0, fs, ["c"] * 19, rng.standard_normal((19, int(round(seconds * fs)))))


def test_segment_counts(rng):
    assert len(dsp.segment_epochs(rec_of(20, 128.0, rng))) == 7
    assert len(dsp.segment_epochs(rec_of(5, 256.0, rng))) == 1
    with pytest.raises(TooShortSignal):
        dsp.segment_epochs(rec_of(4.9, 256.0, rng))


def test_epochs_tile_and_normalize(rng):
    rec = rec_of(30, 256.0, rng)
    epochs = dsp.segment_epochs(rec)
    n_t = dsp.epoch_length(256.0)
    assert n_t == 1280
    assert len(epochs) == (rec.n_samples - n_t) // (n_t // 2) + 1
    for k, ep in enumerate(epochs):
        assert ep.segment_index == k and ep.data.shape == (19, n_t)
        assert np.all(np.abs(ep.data.mean(axis=1)) < 1e-9)
        assert np.all(np.abs(ep.data.var(axis=1) - 1.0) < 1e-6)
        raw = rec.data[:, k * 640:k * 640 + n_t]
        assert np.allclose(ep.data, dsp.zscore(raw))


def test_epoch_length_rounding():
    assert dsp.epoch_length(250.3) == round(5 * 250.3)
    assert dsp.epoch_length(200.1) == 1001


def test_zscore_cases():
    z = dsp.zscore(np.array([[1.0, 2.0, 3.0, 4.0], [7.0, 7.0, 7.0, 7.0]]))
    assert abs(z[0].mean()) < 1e-12 and abs(z[0].var() - 1.0) < 1e-12
    assert np.array_equal(z[1], np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 40), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_zscore_idempotent(x):
    z = dsp.zscore(x)
    assert np.allclose(dsp.zscore(z), z, atol=1e-9)


def test_preprocess_keeps_shape(rng):
    rec = rec_of(6, 256.0, rng)
    out = dsp.preprocess_recording(rec)
    assert out.data.shape == rec.data.shape and np.all(np.isfinite(out.data))
