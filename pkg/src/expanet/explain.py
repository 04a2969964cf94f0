"""Post-hoc saliency masks, group aggregation and attention maps."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import EmptyGroup, ShapeMismatch
from .features import FEATURE_NAMES
from .io import CHANNELS
from .model import ModelParams, batch_graphs, forward_batch

log = logging.getLogger(__name__)

GROUPS = (0, 1)


@dataclass(frozen=True)
class ExplainConfig:
    steps: int = 200
    lr: float = 0.01
    alpha: float = 0.005    # L1 on edge masks
    beta: float = 0.1       # entropy of edge masks
    gamma: float = 0.005    # L1 on feature masks
    delta: float = 0.1      # entropy of feature masks
    eta: float = 0.005      # L1 on node masks
    zeta: float = 0.1       # entropy of node masks
    directed: bool = True
    batch_size: int = 64

    def to_dict(self):
        return asdict(self)


@dataclass
class MaskSet:
    """Mask logits for one graph.

    In directed mode ``edge_logits`` has two entries per undirected edge k =
    (i, j), i < j: index 2k is the message j -> i and 2k + 1 is i -> j.
    """
    edge_logits: np.ndarray
    node_logits: np.ndarray
    feature_logits: np.ndarray
    edges: np.ndarray
    directed: bool = True
    reference_label: int = -1
    masked_prob: float = float("nan")
    faithful: bool = True

    @property
    def pi_E(self):
        return ad.expit(self.edge_logits)

    @property
    def pi_V(self):
        return ad.expit(self.node_logits)

    @property
    def pi_F(self):
        return ad.expit(self.feature_logits)

    @classmethod
    def constant(cls, graph, value=0.0, directed=True, n_features=None):
        n_edges = len(graph.edges) * (2 if directed else 1)
        n_features = graph.node_features.shape[1] if n_features is None else n_features
        return cls(np.full(n_edges, float(value)), np.full(graph.n_nodes, float(value)),
                   np.full(n_features, float(value)), graph.edges.copy(), directed)

    def check(self, graph):
        n_edges = len(graph.edges) * (2 if self.directed else 1)
        if self.edge_logits.shape != (n_edges,):
            raise ShapeMismatch(f"edge mask has {self.edge_logits.shape}, graph needs {n_edges}")
        if self.node_logits.shape != (graph.n_nodes,):
            raise ShapeMismatch("node mask does not match the node count")
        if self.feature_logits.shape != (graph.node_features.shape[1],):
            raise ShapeMismatch("feature mask does not match the feature count")

    def to_dict(self):
        return {"edge_logits": self.edge_logits.tolist(), "node_logits": self.node_logits.tolist(),
                "feature_logits": self.feature_logits.tolist(), "edges": self.edges.tolist(),
                "directed": self.directed, "reference_label": int(self.reference_label),
                "masked_prob": float(self.masked_prob), "faithful": bool(self.faithful)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["edge_logits"], float), np.asarray(d["node_logits"], float),
                   np.asarray(d["feature_logits"], float),
                   np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2), bool(d["directed"]),
                   int(d["reference_label"]), float(d["masked_prob"]), bool(d["faithful"]))


def directed_edge_mask(masks: MaskSet):
    """Per directed message (batch order) relaxed edge mask."""
    pi = masks.pi_E
    return pi if masks.directed else np.repeat(pi, 2)


def apply_masks(graph, masks: MaskSet, features=None):
    """Masked adjacency and node features (plain arrays).

    Row i of the returned adjacency holds the messages received by node i, so
    in directed mode it need not be symmetric. Pairs without an edge stay 0.
    """
    masks.check(graph)
    x = graph.node_features if features is None else features
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    pi = directed_edge_mask(masks)
    adj = np.zeros_like(graph.adjacency)
    adj[i, j] = pi[0::2] * graph.adjacency[i, j]     # message j -> i
    adj[j, i] = pi[1::2] * graph.adjacency[j, i]     # message i -> j
    x_masked = masks.pi_V[:, None] * (np.asarray(x, float) * masks.pi_F[None, :])
    return adj, x_masked


# -- differentiable objective over a batch ----------------------------------------

def _masked_batch(batch, edge_logits, node_logits, feature_logits, directed):
    """Swap the batch inputs for masked Tensors built from logit Tensors."""
    pi_E = ad.sigmoid(edge_logits)
    if not directed:
        pi_E = pi_E[_undirected_position(batch)]
    pi_V = ad.sigmoid(node_logits)
    pi_F = ad.sigmoid(feature_logits)
    x = ad.reshape(pi_V, (-1, 1)) * (ad.as_tensor(batch.x) * pi_F[batch.node_graph])
    edge_attr = pi_E * batch.edge_attr
    return type(batch)(x=x, edge_attr=edge_attr, src=batch.src, dst=batch.dst,
                       node_graph=batch.node_graph, n_graphs=batch.n_graphs,
                       undirected_index=batch.undirected_index, edge_graph=batch.edge_graph)


def _undirected_position(batch):
    """Global undirected-edge index of each directed message."""
    counts = np.bincount(batch.edge_graph, minlength=batch.n_graphs) // 2
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return offsets[batch.edge_graph] + batch.undirected_index


def bernoulli_entropy(logits):
    """Elementwise H(sigmoid(m)) = softplus(m) - m sigmoid(m); exact at the limits."""
    logits = ad.as_tensor(logits)
    return ad.softplus(logits) - logits * ad.sigmoid(logits)


def _group_reg(logits, ids, n, l1, ent):
    """Per-segment l1 * sum(pi) + ent * mean(H(pi))."""
    pi = ad.sigmoid(logits)
    counts = np.maximum(np.bincount(ids, minlength=n), 1).astype(float)
    total = ad.segment_sum(pi, ids, n) * l1
    return total + ad.segment_sum(bernoulli_entropy(logits), ids, n) * (ent / counts)


def _fidelity_terms(logits, reference):
    """-log p(reference) per graph from logits: softplus(z (1 - 2 y))."""
    sign = 1.0 - 2.0 * np.asarray(reference, dtype=np.float64)
    return ad.softplus(logits * sign)


def regularization_loss(masks: MaskSet, cfg: ExplainConfig = ExplainConfig()):
    """Sparsity (L1) plus mean Bernoulli entropy of each mask family; a scalar Tensor."""
    total = None
    for logits, l1, ent in ((masks.edge_logits, cfg.alpha, cfg.beta),
                            (masks.feature_logits, cfg.gamma, cfg.delta),
                            (masks.node_logits, cfg.eta, cfg.zeta)):
        m = ad.as_tensor(logits)
        term = ad.tsum(ad.sigmoid(m)) * l1 + ad.mean(bernoulli_entropy(m)) * ent
        total = term if total is None else total + term
    return total


def masked_logit(params: ModelParams, graph, masks: MaskSet, features=None):
    masks.check(graph)
    batch = batch_graphs([graph], None if features is None else [features])
    masked = _masked_batch(batch, ad.as_tensor(masks.edge_logits), ad.as_tensor(masks.node_logits),
                           ad.as_tensor(masks.feature_logits[None, :]), masks.directed)
    return forward_batch(masked, params.frozen())


def fidelity_loss(params: ModelParams, graph, masks: MaskSet, reference_label, features=None):
    """-log of the probability the frozen model gives ``reference_label`` on the masked graph."""
    return float(_fidelity_terms(masked_logit(params, graph, masks, features),
                                 [reference_label]).data[0])


def reference_labels(params: ModelParams, graphs, features=None, batch_size=256):
    probs = []
    for start in range(0, len(graphs), batch_size):
        sl = slice(start, start + batch_size)
        logits = forward_batch(batch_graphs(graphs[sl], None if features is None else features[sl]),
                               params)
        probs.append(ad.expit(logits.data))
    probs = np.concatenate(probs)
    return (probs >= 0.5).astype(int), probs


def _optimize_chunk(params, graphs, feats, refs, cfg):
    batch = batch_graphs(graphs, feats)
    n_edges = len(batch.src) if cfg.directed else len(batch.src) // 2
    n_feat = batch.x.shape[1]
    M_E = ad.Tensor(np.zeros(n_edges), requires_grad=True)
    M_V = ad.Tensor(np.zeros(batch.n_nodes), requires_grad=True)
    M_F = ad.Tensor(np.zeros((batch.n_graphs, n_feat)), requires_grad=True)
    edge_ids = batch.edge_graph if cfg.directed else batch.edge_graph[0::2]
    feat_ids = np.repeat(np.arange(batch.n_graphs), n_feat)
    opt = ad.Adam([M_E, M_V, M_F], lr=cfg.lr)
    frozen = params.frozen()

    def objective():
        logits = forward_batch(_masked_batch(batch, M_E, M_V, M_F, cfg.directed), frozen)
        loss = _fidelity_terms(logits, refs)
        loss = loss + _group_reg(M_E, edge_ids, batch.n_graphs, cfg.alpha, cfg.beta)
        loss = loss + _group_reg(ad.reshape(M_F, (-1,)), feat_ids, batch.n_graphs,
                                 cfg.gamma, cfg.delta)
        loss = loss + _group_reg(M_V, batch.node_graph, batch.n_graphs, cfg.eta, cfg.zeta)
        return ad.tsum(loss), logits

    for _ in range(cfg.steps):
        opt.zero_grad()
        with ad.Tape() as tape:
            loss, _ = objective()
        tape.backward(loss)
        opt.step()
    logits = forward_batch(_masked_batch(batch, M_E, M_V, M_F, cfg.directed), frozen)
    probs = ad.expit(logits.data)

    out = []
    e_off = v_off = 0
    for gi, g in enumerate(graphs):
        ne = len(g.edges) * (2 if cfg.directed else 1)
        nv = g.n_nodes
        faithful = int(probs[gi] >= 0.5) == int(refs[gi])
        out.append(MaskSet(edge_logits=M_E.data[e_off:e_off + ne].copy(),
                           node_logits=M_V.data[v_off:v_off + nv].copy(),
                           feature_logits=M_F.data[gi].copy(), edges=g.edges.copy(),
                           directed=cfg.directed, reference_label=int(refs[gi]),
                           masked_prob=float(probs[gi]), faithful=faithful))
        e_off += ne
        v_off += nv
    return out


def optimize_masks(params: ModelParams, graphs, features=None,
                   cfg: ExplainConfig = ExplainConfig()):
    """Adam on mask logits (initialized at 0) for a fixed number of steps.

    Graphs are optimized in batches; the objective is a sum of per-graph
    terms and Adam is elementwise, so each graph's masks evolve as if it were
    optimized alone. Masks whose prediction flips are flagged non-faithful.
    """
    single = not isinstance(graphs, (list, tuple))
    if single:
        graphs = [graphs]
        features = None if features is None else [features]
    refs, _ = reference_labels(params, graphs, features)
    results = []
    for start in range(0, len(graphs), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        results.extend(_optimize_chunk(params, graphs[sl],
                                       None if features is None else features[sl],
                                       refs[sl], cfg))
    n_bad = sum(not m.faithful for m in results)
    if n_bad:
        log.warning("%d of %d mask sets are non-faithful", n_bad, len(results))
    return results[0] if single else results


def near_binary_fraction(masks_list, low=0.2, high=0.8):
    """Fraction of all relaxed mask entries inside (low, high)."""
    values = np.concatenate([np.concatenate([m.pi_E, m.pi_V, m.pi_F]) for m in masks_list])
    return float(np.mean((values > low) & (values < high)))


# -- aggregation -----------------------------------------------------------------

def _members(labels, group):
    idx = [k for k, lab in enumerate(labels) if int(lab) == group]
    if not idx:
        raise EmptyGroup(f"no graphs in group {group}")
    return idx


def aggregate_group(masks_list, labels, groups=GROUPS):
    """Mean feature and node saliency per group: {group: (m_F, m_V)}."""
    out = {}
    for grp in groups:
        idx = _members(labels, grp)
        out[grp] = (np.mean([masks_list[k].pi_F for k in idx], axis=0),
                    np.mean([masks_list[k].pi_V for k in idx], axis=0))
    return out


def edge_saliency_matrix(masks: MaskSet, n_nodes=len(CHANNELS)):
    """Symmetric matrix of max(pi(i->j), pi(j->i)); absent pairs are 0."""
    pi = masks.pi_E
    pair = np.maximum(pi[0::2], pi[1::2]) if masks.directed else pi
    mat = np.zeros((n_nodes, n_nodes))
    i, j = masks.edges[:, 0], masks.edges[:, 1]
    mat[i, j] = pair
    mat[j, i] = pair
    return mat


def aggregate_edges(masks_list, labels, groups=GROUPS, n_nodes=len(CHANNELS)):
    out = {}
    for grp in groups:
        idx = _members(labels, grp)
        out[grp] = np.mean([edge_saliency_matrix(masks_list[k], n_nodes) for k in idx], axis=0)
    return out


def attention_matrices(params: ModelParams, graphs, layer, features=None, batch_size=128):
    """Per-graph [n, n] attention maps of ``layer`` (1-based); row = receiver."""
    mats = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        feats = None if features is None else features[start:start + batch_size]
        batch = batch_graphs(chunk, feats)
        trace = {}
        forward_batch(batch, params, trace=trace)
        alpha = trace["alpha"][layer - 1]
        n = chunk[0].n_nodes
        offsets = np.concatenate([[0], np.cumsum([g.n_nodes for g in chunk])[:-1]])
        local = offsets[batch.edge_graph]
        block = np.zeros((len(chunk), n, n))
        block[batch.edge_graph, batch.dst - local, batch.src - local] = alpha
        mats.extend(block)
    return mats


def extract_attention(params: ModelParams, graphs, labels, layer, features=None, groups=GROUPS):
    """Mean attention matrix per group for one layer."""
    mats = attention_matrices(params, graphs, layer, features)
    return {grp: np.mean([mats[k] for k in _members(labels, grp)], axis=0) for grp in groups}


def attention_difference(mean_a, mean_b):
    """Signed elementwise difference plus a symmetric colour limit."""
    mean_a, mean_b = np.asarray(mean_a, float), np.asarray(mean_b, float)
    if mean_a.shape != mean_b.shape:
        raise ShapeMismatch(f"{mean_a.shape} vs {mean_b.shape}")
    diff = mean_a - mean_b
    return diff, float(np.max(np.abs(diff))) if diff.size else 0.0


# -- bundle ----------------------------------------------------------------------

@dataclass
class SaliencyBundle:
    features: dict = field(default_factory=dict)    # group -> [14]
    nodes: dict = field(default_factory=dict)       # group -> [19]
    edges: dict = field(default_factory=dict)       # group -> [19, 19]
    attention: dict = field(default_factory=dict)   # layer -> {group -> [19, 19]}
    attention_diff: dict = field(default_factory=dict)  # layer -> [19, 19] (HC - MDD)
    feature_names: tuple = FEATURE_NAMES
    channel_names: tuple = CHANNELS
    missing_groups: tuple = ()
    faithful_fraction: float = float("nan")
    near_binary_fraction: float = float("nan")

    def to_json(self):
        def conv(d):
            return {str(k): np.asarray(v).tolist() for k, v in d.items()}
        return json.dumps({
            "features": conv(self.features), "nodes": conv(self.nodes),
            "edges": conv(self.edges),
            "attention": {str(l): conv(d) for l, d in self.attention.items()},
            "attention_diff": conv(self.attention_diff),
            "feature_names": list(self.feature_names), "channel_names": list(self.channel_names),
            "missing_groups": list(self.missing_groups),
            "faithful_fraction": self.faithful_fraction,
            "near_binary_fraction": self.near_binary_fraction,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)

        def conv(m):
            return {int(k): np.asarray(v, dtype=np.float64) for k, v in m.items()}
        return cls(features=conv(d["features"]), nodes=conv(d["nodes"]), edges=conv(d["edges"]),
                   attention={int(l): conv(m) for l, m in d["attention"].items()},
                   attention_diff=conv(d["attention_diff"]),
                   feature_names=tuple(d["feature_names"]),
                   channel_names=tuple(d["channel_names"]),
                   missing_groups=tuple(d["missing_groups"]),
                   faithful_fraction=d["faithful_fraction"],
                   near_binary_fraction=d["near_binary_fraction"])


def build_bundle(params: ModelParams, graphs, masks_list, features=None, labels=None):
    """Group saliency and attention summaries; empty groups are skipped and listed."""
    labels = [g.label for g in graphs] if labels is None else list(labels)
    present = tuple(grp for grp in GROUPS if any(int(l) == grp for l in labels))
    bundle = SaliencyBundle(missing_groups=tuple(g for g in GROUPS if g not in present))
    if present:
        for grp, (m_f, m_v) in aggregate_group(masks_list, labels, present).items():
            bundle.features[grp], bundle.nodes[grp] = m_f, m_v
        bundle.edges = aggregate_edges(masks_list, labels, present)
        for layer in range(1, len(params.hyper.hidden_dims) + 1):
            bundle.attention[layer] = extract_attention(params, graphs, labels, layer,
                                                        features, present)
            if len(present) == 2:
                bundle.attention_diff[layer] = attention_difference(
                    bundle.attention[layer][0], bundle.attention[layer][1])[0]
    if masks_list:
        bundle.faithful_fraction = float(np.mean([m.faithful for m in masks_list]))
        bundle.near_binary_fraction = near_binary_fraction(masks_list)
    return bundle
