"""ExPANet: edge-gated graph attention, AxisMix, virtual node and triple pooling.

Graphs are batched as one disjoint union: nodes of every graph are stacked,
directed edges (both orientations of each undirected pair) are offset into the
stacked index space, and per-graph reductions go through segment ops keyed by
``node_graph``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import IsolatedNode, ShapeMismatch


@dataclass(frozen=True)
class ModelHyper:
    in_dim: int = 14
    hidden_dims: tuple = (64, 64)
    gate_hidden: int = 8
    head_dims: tuple = (64, 16)
    leaky_slope: float = 0.2
    dropout: float = 0.2
    top_k: int = 5

    def __post_init__(self):
        if len(self.hidden_dims) < 1:
            raise ValueError("need at least one graph layer")

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        d["head_dims"] = tuple(d["head_dims"])
        return cls(**d)


def _param_shapes(hyper: ModelHyper):
    shapes = {}
    d_prev = hyper.in_dim
    for l, d in enumerate(hyper.hidden_dims, start=1):
        p = f"layer{l}."
        shapes.update({
            p + "W": (d, d_prev),
            p + "a": (2 * d + 1,),
            p + "gate_W1": (hyper.gate_hidden, 1),
            p + "gate_W2": (1, hyper.gate_hidden),
            p + "mix_W1": (2 * d, d),
            p + "mix_W2": (d, 2 * d),
            p + "ln_gamma": (d,),
            p + "ln_beta": (d,),
            p + "vn_W": (d, d),
            p + "vn_b": (d,),
        })
        d_prev = d
    widths = [3 * d_prev, *hyper.head_dims, 1]
    for i in range(len(widths) - 1):
        shapes[f"head.W{i + 1}"] = (widths[i + 1], widths[i])
        shapes[f"head.b{i + 1}"] = (widths[i + 1],)
    return shapes


@dataclass
class ModelParams:
    hyper: ModelHyper
    tensors: dict = field(default_factory=dict)   # name -> Tensor

    @classmethod
    def init(cls, hyper: ModelHyper = ModelHyper(), seed=42):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _param_shapes(hyper).items():
            leaf = name.split(".")[-1]
            if leaf == "ln_gamma":
                value = np.ones(shape)
            elif leaf in ("ln_beta", "vn_b") or leaf.startswith("b"):
                value = np.zeros(shape)
            elif leaf == "a":
                limit = np.sqrt(6.0 / (shape[0] + 1))
                value = rng.uniform(-limit, limit, shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, shape)
            tensors[name] = Tensor(value, requires_grad=True, name=name)
        return cls(hyper, tensors)

    @classmethod
    def from_arrays(cls, hyper, arrays):
        expected = _param_shapes(hyper)
        if set(expected) != set(arrays):
            raise ShapeMismatch("parameter names do not match the architecture")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        return cls(hyper, tensors)

    def arrays(self):
        return {name: t.data for name, t in self.tensors.items()}

    def parameters(self):
        return list(self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def frozen(self):
        """Constant views of the same arrays: gradients never reach them."""
        return ModelParams(self.hyper, {n: Tensor(t.data, name=n) for n, t in self.tensors.items()})

    def copy(self):
        return ModelParams.from_arrays(self.hyper, self.arrays())

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()


@dataclass
class GraphBatch:
    x: object                 # [n_nodes, in_dim] array or Tensor
    edge_attr: object         # [n_edges] array or Tensor, one entry per directed edge
    src: np.ndarray           # [n_edges] message source node
    dst: np.ndarray           # [n_edges] receiving node
    node_graph: np.ndarray    # [n_nodes] graph index of each node
    n_graphs: int
    undirected_index: np.ndarray = None   # [n_edges] index into each graph's edge list
    edge_graph: np.ndarray = None

    @property
    def n_nodes(self):
        return int(self.node_graph.shape[0])


def batch_graphs(graphs, features=None):
    """Stack graphs into a :class:`GraphBatch`.

    ``features`` optionally replaces each graph's ``node_features`` (for
    example with standardized values); it is a list aligned with ``graphs``.
    """
    xs, srcs, dsts, attrs, node_graph, und, edge_graph = [], [], [], [], [], [], []
    offset = 0
    for gi, g in enumerate(graphs):
        x = g.node_features if features is None else features[gi]
        n = x.shape[0]
        i, j = g.edges[:, 0], g.edges[:, 1]
        w = g.adjacency[i, j]
        # undirected pair k -> directed edges (j -> i) at 2k and (i -> j) at 2k+1
        src = np.empty(2 * len(i), dtype=np.int64)
        dst = np.empty_like(src)
        src[0::2], dst[0::2] = j, i
        src[1::2], dst[1::2] = i, j
        deg = np.bincount(dst, minlength=n)
        if deg.min() < 1:
            raise IsolatedNode(f"node {int(np.argmin(deg))} of graph {gi} has no neighbours")
        xs.append(np.asarray(x, dtype=np.float64))
        srcs.append(src + offset)
        dsts.append(dst + offset)
        attrs.append(np.repeat(w, 2))
        und.append(np.repeat(np.arange(len(i)), 2))
        node_graph.append(np.full(n, gi, dtype=np.int64))
        edge_graph.append(np.full(2 * len(i), gi, dtype=np.int64))
        offset += n
    return GraphBatch(x=np.concatenate(xs), edge_attr=np.concatenate(attrs),
                      src=np.concatenate(srcs), dst=np.concatenate(dsts),
                      node_graph=np.concatenate(node_graph), n_graphs=len(graphs),
                      undirected_index=np.concatenate(und),
                      edge_graph=np.concatenate(edge_graph))


# -- building blocks ------------------------------------------------------------

def edge_gate(edge_attr, W1, W2, slope=0.2):
    """sigmoid(W2 . leaky_relu(W1 * e)) for each edge feature e."""
    e = ad.as_tensor(edge_attr)
    hidden = ad.leaky_relu(ad.reshape(e, (-1, 1)) @ ad.transpose(W1), slope)
    return ad.sigmoid(ad.reshape(hidden @ ad.transpose(W2), (-1,)))


def attention_coeffs(Wh, edge_attr, a, src, dst, n_nodes, slope=0.2):
    """Neighbourhood softmax of leaky_relu(a . [Wh_i | Wh_j | e_ij]) per receiver i."""
    d = Wh.shape[1]
    s_recv = Wh @ a[:d]
    s_send = Wh @ a[d:2 * d]
    score = s_recv[dst] + s_send[src] + a[2 * d:] * ad.as_tensor(edge_attr)
    return ad.segment_softmax(ad.leaky_relu(score, slope), dst, n_nodes)


def layer_forward(h, batch: GraphBatch, params: ModelParams, layer: int, trace=None):
    """Edge-gated attention aggregation followed by ELU."""
    p = f"layer{layer}."
    slope = params.hyper.leaky_slope
    W = params[p + "W"]
    h = ad.as_tensor(h)
    if h.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"layer {layer}: input width {h.shape[1]} != {W.shape[1]}")
    Wh = h @ ad.transpose(W)
    alpha = attention_coeffs(Wh, batch.edge_attr, params[p + "a"], batch.src, batch.dst,
                             batch.n_nodes, slope)
    gate = edge_gate(batch.edge_attr, params[p + "gate_W1"], params[p + "gate_W2"], slope)
    agg = ad.edge_aggregate(Wh, gate * alpha, batch.src, batch.dst, batch.n_nodes)
    if trace is not None:
        trace.setdefault("alpha", []).append(alpha.data.copy())
        trace.setdefault("gate", []).append(gate.data.copy())
    return ad.elu(agg)


def axis_mix(h, params: ModelParams, layer: int, eps=1e-5):
    p = f"layer{layer}."
    normed = ad.layer_norm(h, params[p + "ln_gamma"], params[p + "ln_beta"], eps)
    expanded = ad.silu(normed @ ad.transpose(params[p + "mix_W1"]))
    return h + expanded @ ad.transpose(params[p + "mix_W2"])


def virtual_node_update(z, batch: GraphBatch, params: ModelParams, layer: int):
    """Returns (z_i + v', v') with v' = silu(W_v mean(z) + b_v) per graph."""
    p = f"layer{layer}."
    v = ad.segment_mean(z, batch.node_graph, batch.n_graphs)
    v_new = ad.silu(v @ ad.transpose(params[p + "vn_W"]) + params[p + "vn_b"])
    return z + v_new[batch.node_graph], v_new


def pool_and_classify(h, v_new, batch: GraphBatch, params: ModelParams):
    """Triple pooling then the MLP head; returns (logits, pooled vector)."""
    g_mean = ad.segment_mean(h, batch.node_graph, batch.n_graphs)
    g_add = ad.segment_sum(h, batch.node_graph, batch.n_graphs)
    g = ad.concat([g_mean, g_add, v_new], axis=1)
    n_head = len(params.hyper.head_dims) + 1
    out = g
    for i in range(1, n_head + 1):
        out = out @ ad.transpose(params[f"head.W{i}"]) + params[f"head.b{i}"]
        if i < n_head:
            out = ad.relu(out)
    return ad.reshape(out, (-1,)), (g_mean, g_add, v_new)


def bce_loss(logits, labels):
    """Mean binary cross-entropy in logit form: softplus(z) - y z."""
    labels = np.asarray(labels, dtype=np.float64)
    logits = ad.as_tensor(logits)
    if logits.shape != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    return ad.mean(ad.softplus(logits) - logits * labels)


def forward_batch(batch: GraphBatch, params: ModelParams, training=False, rng=None,
                  trace=None):
    """Logits for every graph of ``batch`` (a Tensor)."""
    h = ad.as_tensor(batch.x)
    n_layers = len(params.hyper.hidden_dims)
    v_new = None
    for layer in range(1, n_layers + 1):
        h = layer_forward(h, batch, params, layer, trace)
        z = axis_mix(h, params, layer)
        h, v_new = virtual_node_update(z, batch, params, layer)
        if trace is not None:
            trace.setdefault("h", []).append(h.data.copy())
        if training and layer < n_layers and params.hyper.dropout > 0.0:
            keep = 1.0 - params.hyper.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
    logits, pooled = pool_and_classify(h, v_new, batch, params)
    if trace is not None:
        trace["g_mean"], trace["g_add"], trace["g_v"] = (t.data.copy() for t in pooled)
        trace["logit"] = logits.data.copy()
    return logits


@dataclass
class ForwardTrace:
    alpha: list          # per layer, [n_edges] in batch edge order
    gate: list
    h: list
    g_mean: np.ndarray
    g_add: np.ndarray
    g_v: np.ndarray
    logit: np.ndarray
    src: np.ndarray
    dst: np.ndarray


def model_forward(graph, params: ModelParams, record_trace=False, features=None):
    """Probability of class 1 (MDD) for one graph, plus its trace if requested."""
    batch = batch_graphs([graph], None if features is None else [features])
    raw = {} if record_trace else None
    logits = forward_batch(batch, params, trace=raw)
    prob = float(ad.expit(logits.data)[0])
    if not record_trace:
        return prob
    trace = ForwardTrace(alpha=raw["alpha"], gate=raw["gate"], h=raw["h"],
                         g_mean=raw["g_mean"][0], g_add=raw["g_add"][0], g_v=raw["g_v"][0],
                         logit=raw["logit"], src=batch.src, dst=batch.dst)
    return prob, trace


def predict_proba(graphs, params: ModelParams, features=None, batch_size=256):
    probs = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        feats = None if features is None else features[start:start + batch_size]
        logits = forward_batch(batch_graphs(chunk, feats), params)
        probs.append(ad.expit(logits.data))
    return np.concatenate(probs) if probs else np.zeros(0)
