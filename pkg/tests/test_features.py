import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from expanet import dsp
from expanet import features as F
from expanet.errors import DegenerateSignal, SingularFit, TooShort, ZeroVariance

FS = 256.0


def sine(freq, n=1280, fs=FS):
    return np.sin(2 * np.pi * freq * np.arange(n) / fs)


def band(name):
    return next(b for b in dsp.BANDS if b.name == name)


# -- closed-form cases ---------------------------------------------------------

def test_variance_and_line_length_small_cases():
    assert F.variance([1.0, 1.0, 1.0]) == 0.0
    assert F.variance([0.0, 2.0]) == 1.0
    assert F.line_length([5.0, 5.0, 5.0]) == 0.0
    assert F.line_length([0.0, 1.0, 0.0, 1.0]) == 3.0
    with pytest.raises(TooShort):
        F.variance([1.0])


def test_hjorth_sine():
    x = sine(10.0)
    # first-difference derivative of a sinusoid: 2 fs sin(pi f / fs)
    assert rel(F.hjorth_mobility(x, FS), 2 * FS * math.sin(math.pi * 10 / FS)) < 1e-3
    assert abs(F.hjorth_mobility(x, FS) / (2 * np.pi * 10) - 1.0) < 0.02
    assert abs(F.hjorth_complexity(x, FS) - 1.0) < 0.03


def test_hjorth_orderings(rng):
    noise = rng.standard_normal(1280)
    assert F.hjorth_mobility(noise, FS) > F.hjorth_mobility(np.cumsum(noise), FS)
    assert F.hjorth_complexity(noise, FS) > F.hjorth_complexity(sine(10.0), FS)
    with pytest.raises(ZeroVariance):
        F.hjorth_mobility(np.full(100, 3.0), FS)
    with pytest.raises(ZeroVariance):
        F.hjorth_complexity(np.full(100, 3.0), FS)


def test_katz_line_and_constant():
    assert abs(F.katz_fd(2.5 * np.arange(500.0)) - 1.0) < 1e-9
    with pytest.raises(DegenerateSignal):
        F.katz_fd(np.ones(50))


def test_higuchi_reference_points(rng):
    assert abs(F.higuchi_fd(np.arange(2000.0)) - 1.0) < 0.05
    noise = F.higuchi_fd(rng.standard_normal(640))
    assert abs(noise - 2.0) < 0.15
    s = F.higuchi_fd(sine(10.0, 640))
    assert 1.0 < s < noise
    with pytest.raises(TooShort):
        F.higuchi_fd(np.arange(19.0), 10)


def test_dfa_reference_points(rng):
    assert abs(F.dfa_exponent(rng.standard_normal(2000)) - 0.5) < 0.1
    assert abs(F.dfa_exponent(np.cumsum(rng.standard_normal(2000))) - 1.5) < 0.15
    with pytest.raises(SingularFit):
        F.dfa_exponent(np.full(400, 2.0))
    with pytest.raises(TooShort):
        F.dfa_exponent(np.ones(255))


def test_dfa_line_fluctuation_scales_quadratically():
    # profile of a centred ramp is a parabola, whose linear-fit residual grows as n^2
    assert abs(F.dfa_exponent(np.arange(1280.0)) - 2.0) < 0.1


LZ_CASES = [
    ([0, 1] * 10, 2),
    ([0, 0, 0, 0], 1),
    ([1, 1, 1, 1, 1, 1], 1),
    ([0, 0, 0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0], 5),
    ([0, 1, 1, 0, 1, 0, 0, 1], 4),
]


@pytest.mark.parametrize("bits,count", LZ_CASES)
def test_lz_phrase_counts_frozen(bits, count):
    assert F.lzc_phrase_count(bits) == count
    assert oracles.lz_phrases(bits) == count


def test_lzc_constant_and_random_range(rng):
    assert F.lzc_phrase_count(F.binarize(np.full(64, 4.0))) == 1
    assert abs(F.lzc(np.full(64, 4.0)) - math.log2(64) / 64) < 1e-15
    vals = [F.lzc(rng.standard_normal(640)) for _ in range(20)]
    assert all(0.8 < v < 1.3 for v in vals)


def test_binarize_ties_go_low():
    assert F.binarize([1.0, 2.0, 2.0, 3.0]).tolist() == [0, 0, 0, 1]


def test_perm_entropy_cases(rng):
    assert F.perm_entropy(np.arange(100.0)) == 0.0
    assert F.perm_entropy(rng.uniform(size=10000)) >= 0.99
    with pytest.raises(TooShort):
        F.perm_entropy([1.0, 2.0, 3.0])


def test_band_power_cases(rng):
    assert F.band_power(np.zeros(640), band("alpha"), 128.0) == math.log(1e-12)
    x = sine(10.0, 640, 128.0)
    assert F.band_power(x, band("alpha"), 128.0) - F.band_power(x, band("delta"), 128.0) >= 5.0
    y = rng.standard_normal(640)
    gain = F.band_power(2 * y, band("beta"), 128.0) - F.band_power(y, band("beta"), 128.0)
    assert abs(gain - math.log(4.0)) < 0.05


# -- brute-force oracles -------------------------------------------------------

def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


@pytest.fixture(scope="module")
def signals():
    rng = np.random.default_rng(77)
    out = [rng.standard_normal(640) for _ in range(4)]
    out += [np.cumsum(rng.standard_normal(640)) for _ in range(3)]
    out += [sine(rng.uniform(2, 30), 640) + 0.3 * rng.standard_normal(640) for _ in range(3)]
    return out


def test_exact_features_match_oracles(signals):
    for x in signals:
        assert rel(F.variance(x), oracles.variance(x)) < 1e-12
        assert rel(F.line_length(x), oracles.line_length(x)) < 1e-12
        assert rel(F.katz_fd(x), oracles.katz(x)) < 1e-12
        assert rel(F.lzc(x), oracles.lzc(x)) < 1e-12
        assert rel(F.perm_entropy(x), oracles.perm_entropy(x)) < 1e-12
        assert rel(F.higuchi_fd(x), oracles.higuchi(x)) < 1e-9
        assert rel(F.dfa_exponent(x, (4, 8, 16, 32, 64)), oracles.dfa(x)) < 1e-9


def test_hjorth_matches_oracle(signals):
    for x in signals:
        assert rel(F.hjorth_mobility(x, FS), oracles.mobility(x, FS)) < 1e-6
        assert rel(F.hjorth_complexity(x, FS), oracles.complexity(x, FS)) < 1e-6


def test_band_power_matches_direct_form_oracle(signals):
    rows = np.stack(signals)
    for b in dsp.BANDS:
        sos = dsp.butterworth_sos(b.low_hz, b.high_hz, FS, 4)
        ref = oracles.band_energy_log(rows, sos)
        got = F.band_power(rows, b, FS)
        assert np.all(np.abs(got - ref) <= 1e-6 * np.abs(ref))


# -- properties ------------------------------------------------------------------

@st.composite
def series(draw):
    """Noise, random walk or noisy sine, from a drawn seed."""
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    n = draw(st.integers(260, 400))
    kind = draw(st.sampled_from(["noise", "walk", "sine"]))
    if kind == "noise":
        return rng.standard_normal(n)
    if kind == "walk":
        return np.cumsum(rng.standard_normal(n))
    return sine(rng.uniform(1, 40), n) + 0.2 * rng.standard_normal(n)


scale = st.floats(0.01, 100).flatmap(lambda v: st.sampled_from([v, -v]))


@settings(max_examples=30, deadline=None)
@given(series(), scale)
def test_amplitude_scaling(x, c):
    y = c * x
    assert rel(F.variance(y), c * c * F.variance(x)) < 1e-9
    assert rel(F.line_length(y), abs(c) * F.line_length(x)) < 1e-9
    for f in (lambda s: F.hjorth_mobility(s, FS), lambda s: F.hjorth_complexity(s, FS),
              F.katz_fd, F.higuchi_fd, lambda s: F.dfa_exponent(s, (4, 8, 16, 32, 64))):
        assert abs(f(y) - f(x)) < 1e-6
    # negation maps each ordinal pattern to a unique partner
    assert abs(F.perm_entropy(y) - F.perm_entropy(x)) < 1e-12
    if c > 0:
        # an odd-length median sample stays 0 under negation, so only c > 0 is exact
        assert F.lzc(y) == F.lzc(x)


@settings(max_examples=30, deadline=None)
@given(series())
def test_time_reversal(x):
    r = x[::-1].copy()
    assert rel(F.variance(r), F.variance(x)) < 1e-12
    assert rel(F.line_length(r), F.line_length(x)) < 1e-12
    for b in dsp.BANDS:
        assert abs(F.band_power(r, b, FS) - F.band_power(x, b, FS)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(5, 200), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_perm_entropy_range_and_oracle(x):
    pe = F.perm_entropy(x)
    assert 0.0 <= pe <= 1.0
    assert abs(pe - oracles.perm_entropy(x)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=120))
def test_lz_parser_matches_substring_oracle(bits):
    assert F.lzc_phrase_count(bits) == oracles.lz_phrases(bits)


@settings(max_examples=30, deadline=None)
@given(series())
def test_kfd_at_least_one(x):
    assert F.katz_fd(x) >= 1.0 - 1e-12
    assert F.lzc(x) >= 0.0


# -- extract_features ---------------------------------------------------------------

def make_epoch(data, fs=FS):
    return dsp.Epoch(data=data, sample_rate_hz=fs, subject_id="S", label=0, segment_index=0)


def test_extract_features_shape_determinism_and_composition(rng):
    data = rng.standard_normal((19, 1280))
    a = F.extract_features(make_epoch(data))
    b = F.extract_features(make_epoch(data.copy()))
    assert a.values.shape == (19, 14) and np.all(np.isfinite(a.values))
    assert np.array_equal(a.values, b.values) and not a.flags.any()
    c = 7
    x = data[c]
    expected = [F.variance(x), F.line_length(x), F.hjorth_mobility(x, FS),
                F.hjorth_complexity(x, FS), F.katz_fd(x), F.higuchi_fd(x),
                F.dfa_exponent(x, (4, 8, 16, 32, 64)), F.lzc(x), F.perm_entropy(x)]
    expected += [F.band_power(x, bd, FS) for bd in dsp.BANDS]
    assert np.allclose(a.values[c], expected, rtol=1e-12, atol=1e-12)


def test_constant_channel_gets_sentinels(rng):
    data = rng.standard_normal((19, 1280))
    data[4] = 0.0
    fm = F.extract_features(make_epoch(data))
    assert fm.values[4, 0] == 0.0 and fm.values[4, 1] == 0.0
    names = list(F.FEATURE_NAMES)
    for flagged in ("mobility", "complexity", "kfd", "dfa"):
        assert fm.flags[4, names.index(flagged)]
        assert fm.values[4, names.index(flagged)] == 0.0
    assert not fm.flags[np.arange(19) != 4].any()
    assert np.all(np.isfinite(fm.values))


def test_scaler_uses_fit_statistics_only(rng):
    train = [rng.normal(3.0, 2.0, (19, 14)) for _ in range(5)]
    s = F.FeatureScaler().fit(train)
    z = np.concatenate([s.transform(m) for m in train])
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)
    back = F.FeatureScaler.from_dict(s.to_dict())
    assert np.array_equal(back.transform(train[0]), s.transform(train[0]))
    with pytest.raises(RuntimeError):
        F.FeatureScaler().transform(train[0])


def test_feature_config_round_trip():
    cfg = F.FeatureConfig(hfd_kmax=8, dfa_scales=(4, 8, 16))
    assert F.FeatureConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.scales_for(40) == (4, 8)
