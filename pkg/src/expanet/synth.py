"""Two-class synthetic EEG with known alpha-power and coupling differences.

Class 0 (HC) carries a strong alpha rhythm driven by one source shared by
both hemispheres, so homologous channels are phase locked. Class 1 (MDD)
has weaker alpha, separate left, right and frontal sources, and more noise.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .io import CHANNELS, LABEL_NAMES, Recording, save_recording

SAMPLE_RATE_HZ = 256.0
DURATION_S = 60.0
UV_SCALE = 20.0

LEFT = ("Fp1", "F3", "C3", "P3", "O1", "F7", "T3", "T5")
RIGHT = ("Fp2", "F4", "C4", "P4", "O2", "F8", "T4", "T6")
FRONTAL = ("Fp1", "Fp2", "F3", "F4", "F7", "F8", "Fz")
# relative alpha amplitude, strongest over the back of the head
ALPHA_WEIGHT = {"Fp1": 0.5, "Fp2": 0.5, "F7": 0.6, "F8": 0.6, "F3": 0.7, "F4": 0.7,
                "Fz": 0.7, "T3": 0.7, "T4": 0.7, "C3": 0.8, "C4": 0.8, "Cz": 0.8,
                "T5": 0.9, "T6": 0.9, "P3": 1.0, "P4": 1.0, "Pz": 1.0, "O1": 1.0, "O2": 1.0}


def _alpha_source(rng, n, fs, center_hz):
    """Unit-variance narrowband noise around ``center_hz``."""
    sos = signal.butter(4, [center_hz - 1.5, center_hz + 1.5], btype="bandpass",
                        fs=fs, output="sos")
    x = signal.sosfiltfilt(sos, rng.standard_normal(n + 512))[256:-256]
    return x / x.std()


def _background(rng, n_ch, n):
    """AR(1) (1/f-like) noise per channel, unit variance."""
    e = rng.standard_normal((n_ch, n))
    x = signal.lfilter([1.0], [1.0, -0.95], e, axis=1)
    return x / x.std(axis=1, keepdims=True)


def synth_recording(subject_id, label, seed, duration_s=DURATION_S, fs=SAMPLE_RATE_HZ,
                    alpha_hc=2.0, alpha_mdd=0.8, noise_hc=0.4, noise_mdd=0.7,
                    gain_range=(0.7, 1.3)):
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    n_ch = len(CHANNELS)
    center = rng.uniform(9.0, 11.0)
    gain = rng.uniform(*gain_range)
    data = _background(rng, n_ch, n)
    if label == 0:
        shared = _alpha_source(rng, n, fs, center)
        for c, name in enumerate(CHANNELS):
            data[c] += alpha_hc * gain * ALPHA_WEIGHT[name] * shared
        data += noise_hc * rng.standard_normal((n_ch, n))
    else:
        sources = {key: _alpha_source(rng, n, fs, center) for key in ("left", "right", "front")}
        for c, name in enumerate(CHANNELS):
            if name in FRONTAL:
                src = sources["front"]
            elif name in LEFT:
                src = sources["left"]
            elif name in RIGHT:
                src = sources["right"]
            else:
                src = 0.5 * (sources["left"] + sources["right"])
            local = _alpha_source(rng, n, fs, center)
            data[c] += alpha_mdd * gain * ALPHA_WEIGHT[name] * (0.6 * src + 0.8 * local)
        data += noise_mdd * rng.standard_normal((n_ch, n))
    t = np.arange(n) / fs
    data += 0.2 * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
    return Recording(subject_id=subject_id, label=int(label), sample_rate_hz=fs,
                     channel_names=list(CHANNELS), data=UV_SCALE * data)


def synth_dataset(n_subjects=40, seed=0, duration_s=DURATION_S, fs=SAMPLE_RATE_HZ, **contrast):
    """Balanced list of recordings: the first half HC, the second half MDD."""
    if n_subjects < 2 or n_subjects % 2:
        raise ValueError("n_subjects must be a positive even number")
    recs = []
    for k in range(n_subjects):
        label = 0 if k < n_subjects // 2 else 1
        sid = f"{LABEL_NAMES[label]}{k:03d}"
        recs.append(synth_recording(sid, label, [seed, k], duration_s, fs, **contrast))
    return recs


def write_dataset(out_dir, n_subjects=40, seed=0, duration_s=DURATION_S, fs=SAMPLE_RATE_HZ):
    out_dir = Path(out_dir)
    paths = []
    for rec in synth_dataset(n_subjects, seed, duration_s, fs):
        paths.append(save_recording(rec, out_dir / rec.subject_id))
    return paths
