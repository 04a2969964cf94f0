"""Command-line pipeline: synth, preprocess, featurize, graph, train, explain, report.

Every stage writes its artifacts under ``<work_dir>/<stage>/`` together with a
``manifest.json`` holding the stage config hash and the sha256 of each output.
A downstream stage refuses to run when an upstream manifest is missing, was
produced under a different config, or no longer matches its files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as eio
from .config import PipelineConfig, apply_overrides
from .connectivity import build_graph, load_graphs, save_graphs
from .dsp import Epoch, preprocess_recording, segment_epochs
from .errors import (ConfigInvalid, DimensionMismatch, ExpanetError, NumericalError,
                     StageInputMissing)
from .explain import MaskSet, SaliencyBundle, build_bundle, optimize_masks
from .features import FEATURE_NAMES, FeatureMatrix, FeatureScaler, extract_features
from .synth import write_dataset
from .trainer import MetricsTable, cross_validate, make_folds, train_final

log = logging.getLogger("expanet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
STAGES = ("preprocess", "featurize", "graph", "train", "explain", "report")
UPSTREAM = {"featurize": ("preprocess",), "graph": ("preprocess", "featurize"),
            "train": ("graph",), "explain": ("graph", "train"),
            "report": ("train", "explain")}


# -- manifests -------------------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_dir(cfg: PipelineConfig, stage):
    return Path(cfg.work_dir) / stage


def write_manifest(cfg: PipelineConfig, stage, extra=None):
    root = stage_dir(cfg, stage)
    outputs = {p.relative_to(root).as_posix(): _sha256(p)
               for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    inputs = {}
    for up in UPSTREAM.get(stage, ()):
        inputs[up] = _sha256(stage_dir(cfg, up) / "manifest.json")
    manifest = {"stage": stage, "config_hash": cfg.stage_hash(stage), "inputs": inputs,
                "outputs": outputs, **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def require_stage(cfg: PipelineConfig, stage):
    """Check that ``stage`` ran under the current config and its files are intact."""
    path = stage_dir(cfg, stage) / "manifest.json"
    if not path.exists():
        raise StageInputMissing(f"stage '{stage}' has not been run (no {path})")
    manifest = json.loads(path.read_text())
    if manifest.get("config_hash") != cfg.stage_hash(stage):
        raise StageInputMissing(
            f"stage '{stage}' was produced under a different config; rerun it first")
    for rel, digest in manifest["outputs"].items():
        file = stage_dir(cfg, stage) / rel
        if not file.exists() or _sha256(file) != digest:
            raise StageInputMissing(f"stage '{stage}' output {rel} is missing or modified")
    return manifest


def _fresh_dir(cfg, stage):
    root = stage_dir(cfg, stage)
    root.mkdir(parents=True, exist_ok=True)
    for p in sorted(root.rglob("*"), reverse=True):
        if p.is_file():
            p.unlink()
    return root


# -- stages ----------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig):
    paths = write_dataset(cfg.data_dir, cfg.synth.n_subjects, cfg.synth.seed,
                          cfg.synth.duration_s)
    log.info("wrote %d synthetic recordings to %s", len(paths), cfg.data_dir)
    return paths


def _recording_paths(cfg):
    data_dir = Path(cfg.data_dir)
    paths = sorted(data_dir.glob("*.json")) if data_dir.is_dir() else []
    if not paths:
        raise StageInputMissing(f"no recordings (*.json + *.f32) found in {data_dir}")
    return paths


def cmd_preprocess(cfg: PipelineConfig):
    root = _fresh_dir(cfg, "preprocess")
    d = cfg.dsp
    names = None
    for path in _recording_paths(cfg):
        rec = eio.load_recording(path)
        if names is None:
            names = list(rec.channel_names)
        elif list(rec.channel_names) != names:
            raise DimensionMismatch(f"{path}: channel order differs from earlier recordings")
        rec = preprocess_recording(rec, d.low_hz, d.high_hz, d.notch_hz, d.notch_q, d.n_taps)
        epochs = segment_epochs(rec, d.epoch_s, d.overlap)
        eio.save_arrays(root / rec.subject_id, {"data": np.stack([e.data for e in epochs])},
                        {"subject_id": rec.subject_id, "label": int(rec.label),
                         "sample_rate_hz": float(rec.sample_rate_hz),
                         "segment_index": [e.segment_index for e in epochs]})
        log.info("%s: %d epochs", rec.subject_id, len(epochs))
    return write_manifest(cfg, "preprocess")


def load_epochs(cfg):
    epochs = []
    for path in sorted(stage_dir(cfg, "preprocess").glob("*.json")):
        if path.name == "manifest.json":
            continue
        arrays, meta = eio.load_arrays(path)
        for data, seg in zip(arrays["data"], meta["segment_index"]):
            epochs.append(Epoch(meta["subject_id"], meta["label"], meta["sample_rate_hz"],
                                data, seg))
    return epochs


def cmd_featurize(cfg: PipelineConfig):
    require_stage(cfg, "preprocess")
    root = _fresh_dir(cfg, "featurize")
    epochs = load_epochs(cfg)
    mats = [extract_features(e, cfg.features) for e in epochs]
    values = np.stack([m.values for m in mats])
    flags = np.stack([m.flags for m in mats]).astype(np.float64)
    meta = {"subject_id": [e.subject_id for e in epochs], "label": [int(e.label) for e in epochs],
            "segment_index": [int(e.segment_index) for e in epochs],
            "feature_names": list(FEATURE_NAMES), "channel_names": list(eio.CHANNELS)}
    eio.save_arrays(root / "features", {"values": values, "flags": flags}, meta)
    lines = ["subject_id,label,segment,channel," + ",".join(FEATURE_NAMES)]
    for e, m in zip(epochs, mats):
        for c, ch in enumerate(eio.CHANNELS):
            lines.append(f"{e.subject_id},{e.label},{e.segment_index},{ch},"
                         + ",".join(repr(float(v)) for v in m.values[c]))
    (root / "features.csv").write_text("\n".join(lines) + "\n")
    n_flagged = int(flags.sum())
    if n_flagged:
        log.warning("%d feature values replaced by the sentinel 0", n_flagged)
    return write_manifest(cfg, "featurize", {"n_epochs": len(epochs)})


def cmd_graph(cfg: PipelineConfig):
    require_stage(cfg, "preprocess")
    require_stage(cfg, "featurize")
    root = _fresh_dir(cfg, "graph")
    epochs = load_epochs(cfg)
    arrays, meta = eio.load_arrays(stage_dir(cfg, "featurize") / "features")
    keys = list(zip(meta["subject_id"], meta["segment_index"]))
    if keys != [(e.subject_id, e.segment_index) for e in epochs]:
        raise StageInputMissing("features do not line up with the preprocessed epochs")
    graphs = [build_graph(e, cfg.features, cfg.k,
                          FeatureMatrix(arrays["values"][i], arrays["flags"][i].astype(bool)))
              for i, e in enumerate(epochs)]
    save_graphs(graphs, root / "graphs")
    return write_manifest(cfg, "graph", {"n_graphs": len(graphs)})


def _train_cfg(cfg):
    return replace(cfg.trainer, seed=cfg.seed)


def cmd_train(cfg: PipelineConfig):
    require_stage(cfg, "graph")
    root = _fresh_dir(cfg, "train")
    graphs = load_graphs(stage_dir(cfg, "graph") / "graphs")
    tcfg = _train_cfg(cfg)
    plan = make_folds({g.subject_id: g.label for g in graphs}, tcfg.n_folds, tcfg.seed)
    results, table = cross_validate(graphs, plan, cfg.model, tcfg)
    (root / "metrics.csv").write_text(table.to_csv())
    (root / "folds.json").write_text(json.dumps(
        {"seed": plan.seed, "folds": [{"train": f.train, "test": f.test} for f in plan.folds],
         "best_epoch": [r.best_epoch for r in results]}, indent=1, sort_keys=True) + "\n")
    params, scaler, _, best_epoch = train_final(graphs, cfg.model, tcfg)
    eio.save_model(params, root / "model.bin")
    (root / "scaler.json").write_text(json.dumps(scaler.to_dict(), sort_keys=True) + "\n")
    mean = table.mean()
    log.info("CV accuracy %.2f%%  precision %.2f%%  recall %.2f%%  F1 %.2f%%", *mean)
    return write_manifest(cfg, "train", {"cv_mean": [round(float(v), 6) for v in mean],
                                         "final_best_epoch": best_epoch})


def load_trained(cfg):
    root = stage_dir(cfg, "train")
    params = eio.load_model(root / "model.bin", expected_hyper=cfg.model)
    scaler = FeatureScaler.from_dict(json.loads((root / "scaler.json").read_text()))
    return params, scaler


def cmd_explain(cfg: PipelineConfig):
    require_stage(cfg, "graph")
    require_stage(cfg, "train")
    root = _fresh_dir(cfg, "explain")
    graphs = load_graphs(stage_dir(cfg, "graph") / "graphs")
    params, scaler = load_trained(cfg)
    feats = [scaler.transform(g.node_features) for g in graphs]
    masks = optimize_masks(params, graphs, feats, cfg.explain)
    bundle = build_bundle(params, graphs, masks, feats)
    (root / "masks.json").write_text(json.dumps([m.to_dict() for m in masks]) + "\n")
    (root / "saliency.json").write_text(bundle.to_json() + "\n")
    return write_manifest(cfg, "explain", {"faithful_fraction": bundle.faithful_fraction})


def cmd_report(cfg: PipelineConfig):
    require_stage(cfg, "train")
    require_stage(cfg, "explain")
    root = _fresh_dir(cfg, "report")
    bundle = SaliencyBundle.from_json((stage_dir(cfg, "explain") / "saliency.json").read_text())
    metrics = _metrics_from_csv(stage_dir(cfg, "train") / "metrics.csv")
    eio.write_report(bundle, metrics, root)
    return write_manifest(cfg, "report")


def _metrics_from_csv(path):
    from .trainer import MetricsRow
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        parts = line.split(",")
        if parts[0] in ("mean", "std"):
            continue
        acc, prec, rec, f1 = map(float, parts[2:6])
        rows.append(MetricsRow(acc, prec, rec, f1, n=int(parts[1])))
    return MetricsTable(rows)


def load_masks(cfg):
    text = (stage_dir(cfg, "explain") / "masks.json").read_text()
    return [MaskSet.from_dict(d) for d in json.loads(text)]


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "featurize": cmd_featurize,
            "graph": cmd_graph, "train": cmd_train, "explain": cmd_explain,
            "report": cmd_report}


def cmd_run(cfg: PipelineConfig):
    for stage in STAGES:
        COMMANDS[stage](cfg)


COMMANDS["run"] = cmd_run


# -- entry point -----------------------------------------------------------------

def _parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigInvalid(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="expanet", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="pipeline config JSON (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="overrides 'seed'")
    parser.add_argument("--out", help="overrides 'work_dir'")
    parser.add_argument("--data", help="overrides 'data_dir'")
    parser.add_argument("--n-subjects", type=int, help="overrides 'synth.n_subjects'")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config field by dotted name, e.g. trainer.n_folds=5")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {"seed": args.seed, "work_dir": args.out, "data_dir": args.data,
                 "synth.n_subjects": args.n_subjects}
    overrides.update(_parse_set(args.set))
    return apply_overrides(cfg, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except ConfigInvalid as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ExpanetError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
