"""Versioned JSON pipeline configuration and per-stage config hashes."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .connectivity import DEFAULT_K
from .errors import ConfigInvalid
from .explain import ExplainConfig
from .features import FeatureConfig
from .model import ModelHyper
from .trainer import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DspConfig:
    low_hz: float = 0.1
    high_hz: float = 70.0
    notch_hz: float = 50.0
    notch_q: float = 30.0
    epoch_s: float = 5.0
    overlap: float = 0.5
    n_taps: int | None = None


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 40
    seed: int = 0
    duration_s: float = 60.0


def _dataclass_from(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigInvalid(f"unknown keys in '{section}': {', '.join(unknown)}")
    try:
        if cls is FeatureConfig:
            return FeatureConfig.from_dict(data)
        if cls is ModelHyper:
            return ModelHyper.from_dict({**ModelHyper().to_dict(), **data})
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"section '{section}': {exc}") from exc


def _section_dict(obj):
    return obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    work_dir: str = "work"
    seed: int = 42
    k: int = DEFAULT_K
    dsp: DspConfig = field(default_factory=DspConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelHyper = field(default_factory=ModelHyper)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    _SECTIONS = {"dsp": DspConfig, "features": FeatureConfig, "model": ModelHyper,
                 "trainer": TrainConfig, "explain": ExplainConfig, "synth": SynthConfig}

    def to_dict(self):
        out = {"schema_version": SCHEMA_VERSION, "data_dir": self.data_dir,
               "work_dir": self.work_dir, "seed": self.seed, "k": self.k}
        for name in self._SECTIONS:
            out[name] = _section_dict(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, data):
        data = copy.deepcopy(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigInvalid(f"config schema {version} is not supported (expected "
                                f"{SCHEMA_VERSION})")
        kwargs = {}
        for name, section in cls._SECTIONS.items():
            if name in data:
                kwargs[name] = _dataclass_from(section, data.pop(name), name)
        for key in ("data_dir", "work_dir", "seed", "k"):
            if key in data:
                kwargs[key] = data.pop(key)
        if data:
            raise ConfigInvalid(f"unknown config keys: {', '.join(sorted(data))}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigInvalid(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigInvalid("config root must be an object")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def validate(self):
        if not isinstance(self.seed, int):
            raise ConfigInvalid("seed must be an integer")
        if not (1 <= int(self.k) <= 18):
            raise ConfigInvalid(f"k must be in [1, 18], got {self.k}")
        if not (0.0 <= self.dsp.overlap < 1.0) or self.dsp.epoch_s <= 0:
            raise ConfigInvalid("epoch length must be positive and overlap in [0, 1)")
        if not (0.0 < self.dsp.low_hz < self.dsp.high_hz):
            raise ConfigInvalid("dsp band must satisfy 0 < low_hz < high_hz")
        t = self.trainer
        if t.lr <= 0 or t.batch_size < 1 or t.max_epochs < 1 or t.n_folds < 2:
            raise ConfigInvalid("trainer needs lr > 0, batch_size >= 1, max_epochs >= 1, "
                                "n_folds >= 2")
        e = self.explain
        if min(e.alpha, e.beta, e.gamma, e.delta, e.eta, e.zeta) < 0:
            raise ConfigInvalid("explain coefficients must be non-negative")
        if self.synth.n_subjects < 2 or self.synth.n_subjects % 2:
            raise ConfigInvalid("synth.n_subjects must be a positive even number")
        if self.model.top_k != self.k:
            raise ConfigInvalid(f"model.top_k ({self.model.top_k}) must equal k ({self.k})")

    # stage -> the config sections that determine its output
    STAGE_INPUTS = {
        "preprocess": ("dsp",),
        "featurize": ("dsp", "features"),
        "graph": ("dsp", "features", "k"),
        "train": ("dsp", "features", "k", "model", "trainer", "seed"),
        "explain": ("dsp", "features", "k", "model", "trainer", "seed", "explain"),
        "report": ("dsp", "features", "k", "model", "trainer", "seed", "explain"),
    }

    def stage_hash(self, stage):
        full = self.to_dict()
        relevant = {key: full[key] for key in self.STAGE_INPUTS[stage]}
        text = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Return a copy with dotted-key overrides (``trainer.n_folds`` or ``seed``) applied."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigInvalid(f"unknown config field: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigInvalid(f"unknown config field: {key}")
        node[parts[-1]] = value
    return PipelineConfig.from_dict(data)
