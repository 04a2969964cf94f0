"""Phase-locking connectivity, top-k sparsification and brain-graph assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import Epoch, hilbert_phase
from .errors import CorruptHeader, InvalidK, LengthMismatch, TooShortSignal
from .features import FeatureConfig, extract_features

DEFAULT_K = 5


@dataclass
class BrainGraph:
    node_features: np.ndarray   # [19, 14] raw feature values
    adjacency: np.ndarray       # [19, 19] PLV on retained edges, zero elsewhere
    edges: np.ndarray           # [n_edges, 2] undirected pairs, i < j, sorted
    label: int
    subject_id: str
    segment_index: int
    feature_flags: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def edge_weights(self) -> np.ndarray:
        return self.adjacency[self.edges[:, 0], self.edges[:, 1]]

    def validate(self) -> None:
        a = self.adjacency
        assert np.array_equal(a, a.T), "adjacency must be symmetric"
        assert np.all(np.diag(a) == 0.0), "adjacency diagonal must be zero"
        assert np.all(self.edge_weights > 0.0), "retained edges need positive weight"
        deg = np.bincount(self.edges.ravel(), minlength=self.n_nodes)
        assert deg.min() >= 1, "isolated node"


def plv_pair(phase_i, phase_j):
    """|mean(exp(1j * (phase_i - phase_j)))|, clamped to [0, 1]."""
    phase_i = np.asarray(phase_i, dtype=np.float64)
    phase_j = np.asarray(phase_j, dtype=np.float64)
    if phase_i.shape != phase_j.shape:
        raise LengthMismatch(f"phase lengths differ: {phase_i.shape} vs {phase_j.shape}")
    if phase_i.shape[-1] < 8:
        raise TooShortSignal("PLV needs at least 8 samples")
    value = abs(np.mean(np.exp(1j * (phase_i - phase_j))))
    return float(min(value, 1.0))


def plv_from_phases(phases):
    """All-pairs PLV for a [channels, samples] phase matrix."""
    phasors = np.exp(1j * np.asarray(phases, dtype=np.float64))
    n_t = phasors.shape[1]
    plv = np.abs(phasors @ phasors.conj().T) / n_t
    np.clip(plv, 0.0, 1.0, out=plv)
    plv = 0.5 * (plv + plv.T)
    np.fill_diagonal(plv, 0.0)
    return plv


def plv_matrix(epoch: Epoch):
    data = epoch.data if isinstance(epoch, Epoch) else np.asarray(epoch)
    return plv_from_phases(hilbert_phase(data))


def topk_sparsify(adjacency, k=DEFAULT_K):
    """Union of each node's k strongest neighbours, as sorted (i < j) pairs.

    Ties go to the smaller channel index.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    n = a.shape[0]
    if not (1 <= k <= n - 1):
        raise InvalidK(f"k must be in [1, {n - 1}], got {k}")
    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        ranked = sorted(others, key=lambda j: (-a[i, j], j))
        keep[i, ranked[:k]] = True
    keep |= keep.T
    i, j = np.nonzero(np.triu(keep, 1))
    return np.stack([i, j], axis=1).astype(np.int64)


def sparsify_adjacency(adjacency, edges):
    masked = np.zeros_like(adjacency)
    masked[edges[:, 0], edges[:, 1]] = adjacency[edges[:, 0], edges[:, 1]]
    masked[edges[:, 1], edges[:, 0]] = adjacency[edges[:, 1], edges[:, 0]]
    return masked


def build_graph(epoch: Epoch, feature_cfg: FeatureConfig = FeatureConfig(), k=DEFAULT_K,
                features=None):
    """Feature matrix plus top-k PLV adjacency for one epoch.

    ``features`` may carry a precomputed :class:`FeatureMatrix` for this epoch.
    """
    if features is None:
        features = extract_features(epoch, feature_cfg)
    plv = plv_matrix(epoch)
    edges = topk_sparsify(plv, k)
    # zero-PLV pairs cannot carry an edge; practically unreachable with real phases
    adjacency = sparsify_adjacency(np.maximum(plv, 1e-12) * (1 - np.eye(len(plv))), edges)
    return BrainGraph(node_features=np.asarray(features.values, dtype=np.float64),
                      adjacency=adjacency, edges=edges, label=int(epoch.label),
                      subject_id=epoch.subject_id, segment_index=int(epoch.segment_index),
                      feature_flags=np.asarray(features.flags, dtype=bool))


# -- serialization -------------------------------------------------------------
# A graph set is <stem>.json (per-graph metadata, shapes, blob offsets) plus
# <stem>.f64 holding the float64 arrays back to back.

def save_graphs(graphs, path) -> Path:
    path = Path(path)
    header_path, blob_path = path.with_suffix(".json"), path.with_suffix(".f64")
    entries, chunks, offset = [], [], 0
    for g in graphs:
        arrays = {"node_features": g.node_features, "adjacency": g.adjacency,
                  "edges": g.edges.astype(np.float64)}
        if g.feature_flags is not None:
            arrays["feature_flags"] = g.feature_flags.astype(np.float64)
        layout = {}
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            layout[name] = {"shape": list(arr.shape), "offset": offset}
            chunks.append(arr.tobytes())
            offset += arr.size
        entries.append({"subject_id": g.subject_id, "label": int(g.label),
                        "segment_index": int(g.segment_index), "arrays": layout})
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    header_path.write_text(json.dumps({"format_version": 1, "graphs": entries},
                                      sort_keys=True) + "\n")
    return header_path


def load_graphs(path):
    path = Path(path)
    header_path, blob_path = path.with_suffix(".json"), path.with_suffix(".f64")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptHeader(f"{header_path}: {exc}") from exc
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    graphs = []
    for entry in header["graphs"]:
        arrays = {}
        for name, spec in entry["arrays"].items():
            size = int(np.prod(spec["shape"], dtype=np.int64))
            start = spec["offset"]
            if start + size > blob.size:
                raise CorruptHeader(f"{blob_path}: truncated")
            arrays[name] = blob[start:start + size].reshape(spec["shape"]).copy()
        flags = arrays.get("feature_flags")
        graphs.append(BrainGraph(
            node_features=arrays["node_features"], adjacency=arrays["adjacency"],
            edges=arrays["edges"].astype(np.int64).reshape(-1, 2),
            label=int(entry["label"]), subject_id=entry["subject_id"],
            segment_index=int(entry["segment_index"]),
            feature_flags=None if flags is None else flags.astype(bool)))
    return graphs
