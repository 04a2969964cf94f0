"""Recording and model-file formats.

Recordings live as a pair of files sharing a stem::

    subject.json   {"subject_id", "label", "sample_rate_hz", "channel_names",
                    "n_samples", "dtype": "f32le"}
    subject.f32    raw little-endian float32, row-major [channel][sample]

Model files are a single binary file: an 8-byte magic, a little-endian uint32
manifest length, the JSON manifest (hyperparameters + tensor shapes) and the
float64 little-endian parameter blob in manifest order.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CorruptHeader, DimensionMismatch, MissingChannel, NonFiniteSample,
                     SampleRateTooLow, TooShortSignal, VersionMismatch)

log = logging.getLogger(__name__)

CHANNELS = ("Fp1", "F3", "C3", "P3", "O1", "F7", "T3", "T5", "Fz",
            "Fp2", "F4", "C4", "P4", "O2", "F8", "T4", "T6", "Cz", "Pz")
LABELS = {"HC": 0, "MDD": 1}
LABEL_NAMES = {v: k for k, v in LABELS.items()}

MIN_SAMPLE_RATE_HZ = 140.0  # twice the 70 Hz bandpass edge
MODEL_MAGIC = b"EXPANET\x00"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Montage:
    required_channels: tuple = CHANNELS
    index_map: dict = field(default_factory=lambda: {c: i for i, c in enumerate(CHANNELS)})

    def __post_init__(self):
        if len(self.required_channels) != 19 or len(set(self.required_channels)) != 19:
            raise ValueError("montage must hold 19 unique channel names")


MONTAGE = Montage()


@dataclass
class Recording:
    subject_id: str
    label: int
    sample_rate_hz: float
    channel_names: list
    data: np.ndarray  # [n_channels, n_samples], microvolts

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1])


def _parse_label(value):
    if isinstance(value, str):
        if value.upper() not in LABELS:
            raise CorruptHeader(f"unknown label {value!r}")
        return LABELS[value.upper()]
    if value in (0, 1) and not isinstance(value, bool):
        return int(value)
    raise CorruptHeader(f"unknown label {value!r}")


def _paths(path):
    path = Path(path)
    if path.suffix == ".f32":
        path = path.with_suffix(".json")
    elif path.suffix != ".json":
        path = path.with_name(path.name + ".json")
    return path, path.with_suffix(".f32")


def save_recording(rec: Recording, path) -> Path:
    """Write ``rec`` as a JSON header plus raw float32 matrix; returns the header path."""
    header_path, data_path = _paths(path)
    data = np.asarray(rec.data)
    header = {
        "subject_id": rec.subject_id,
        "label": int(rec.label),
        "sample_rate_hz": float(rec.sample_rate_hz),
        "channel_names": list(rec.channel_names),
        "n_samples": int(data.shape[1]),
        "dtype": "f32le",
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    data_path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header_path


def load_recording(path, montage: Montage = MONTAGE) -> Recording:
    """Load a recording and project it onto the canonical montage order."""
    header_path, data_path = _paths(path)
    try:
        header = json.loads(header_path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptHeader(f"{header_path}: {exc}") from exc
    required = ("subject_id", "label", "sample_rate_hz", "channel_names", "n_samples", "dtype")
    if not isinstance(header, dict) or any(k not in header for k in required):
        raise CorruptHeader(f"{header_path}: header lacks one of {required}")
    if header["dtype"] != "f32le":
        raise CorruptHeader(f"unsupported dtype {header['dtype']!r}")
    names = header["channel_names"]
    if not isinstance(names, list) or len(set(names)) != len(names):
        raise CorruptHeader("channel_names must be a list of unique names")
    try:
        fs = float(header["sample_rate_hz"])
        n_samples = int(header["n_samples"])
    except (TypeError, ValueError) as exc:
        raise CorruptHeader(str(exc)) from exc
    label = _parse_label(header["label"])
    if fs <= MIN_SAMPLE_RATE_HZ:
        raise SampleRateTooLow(f"sample rate {fs} Hz must exceed {MIN_SAMPLE_RATE_HZ} Hz")
    for name in montage.required_channels:
        if name not in names:
            raise MissingChannel(name)

    raw = data_path.read_bytes() if data_path.exists() else b""
    expected = 4 * len(names) * n_samples
    if len(raw) != expected:
        raise CorruptHeader(f"{data_path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(len(names), n_samples)
    bad = np.argwhere(~np.isfinite(data))
    if len(bad):
        raise NonFiniteSample(tuple(int(v) for v in bad[0]))
    if n_samples < 5.0 * fs:
        raise TooShortSignal(f"{n_samples} samples is shorter than one 5 s epoch")

    extra = [n for n in names if n not in montage.index_map]
    if extra:
        log.info("%s: dropping non-montage channels %s", header["subject_id"], extra)
    rows = [names.index(c) for c in montage.required_channels]
    return Recording(subject_id=str(header["subject_id"]), label=label,
                     sample_rate_hz=fs, channel_names=list(montage.required_channels),
                     data=data[rows].astype(np.float64))


# -- model files ----------------------------------------------------------------

def save_model(params, path) -> None:
    """Persist a :class:`~expanet.model.ModelParams` bit-exactly."""
    arrays = params.arrays()
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} holds non-finite values")
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "hyper": params.hyper.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MODEL_MAGIC + struct.pack("<I", len(head)) + head + blob)
    os.replace(tmp, path)


def load_model(path, expected_hyper=None):
    """Load a model file; ``expected_hyper`` (if given) must match the stored one."""
    from .model import ModelHyper, ModelParams

    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MODEL_MAGIC:
        raise CorruptHeader(f"{path}: not a model file")
    (n_head,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + n_head:
        raise CorruptHeader(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12:12 + n_head])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise VersionMismatch(
            f"model format {manifest.get('format_version')} != {MODEL_FORMAT_VERSION}")
    hyper = ModelHyper.from_dict(manifest["hyper"])
    if expected_hyper is not None:
        diffs = {k: (v, hyper.to_dict()[k]) for k, v in expected_hyper.to_dict().items()
                 if hyper.to_dict().get(k) != v}
        if diffs:
            raise DimensionMismatch(
                "stored model differs from expected architecture: "
                + ", ".join(f"{k}: expected {a}, file {b}" for k, (a, b) in diffs.items()))
    blob = raw[12 + n_head:]
    arrays, offset = {}, 0
    for spec in manifest["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CorruptHeader(f"{path}: truncated parameter blob")
        arrays[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                             offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CorruptHeader(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelParams.from_arrays(hyper, arrays)


def write_report(bundle, metrics, out_dir):
    """Saliency and metrics tables plus SVG charts; see :mod:`expanet.report`."""
    from .report import write_report as _write_report
    return _write_report(bundle, metrics, out_dir)


# -- generic array bundles ----------------------------------------------------------
# Stage artifacts: <stem>.json (metadata + array layout) and <stem>.f64 (float64 blob).
# Unlike .npz this is byte-stable across runs.

def save_arrays(path, arrays: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    layout, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        layout[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.size
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".f64").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(
        json.dumps({"meta": meta or {}, "arrays": layout}, sort_keys=True, indent=1) + "\n")
    return path.with_suffix(".json")


def load_arrays(path):
    path = Path(path)
    try:
        header = json.loads(path.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    blob = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8")
    arrays = {}
    for name, spec in header["arrays"].items():
        size = int(np.prod(spec["shape"], dtype=np.int64))
        if spec["offset"] + size > blob.size:
            raise CorruptHeader(f"{path}: truncated array blob")
        arrays[name] = blob[spec["offset"]:spec["offset"] + size].reshape(spec["shape"]).copy()
    return arrays, header["meta"]
