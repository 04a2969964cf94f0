import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from expanet import connectivity as C
from expanet.dsp import Epoch, hilbert_phase
from expanet.errors import InvalidK, LengthMismatch, TooShortSignal


def epoch_of(data, label=1):
    return Epoch(data=data, sample_rate_hz=256.0, subject_id="S7", label=label, segment_index=3)


def test_plv_pair_identity_and_offset(rng):
    phi = rng.uniform(-np.pi, np.pi, 640)
    assert abs(C.plv_pair(phi, phi) - 1.0) < 1e-12
    assert abs(C.plv_pair(phi, phi + 1.234) - 1.0) < 1e-12
    assert C.plv_pair(phi, rng.uniform(-np.pi, np.pi, 640)) < 0.15


def test_plv_pair_errors():
    with pytest.raises(LengthMismatch):
        C.plv_pair(np.zeros(10), np.zeros(11))
    with pytest.raises(TooShortSignal):
        C.plv_pair(np.zeros(7), np.zeros(7))


def test_plv_matrix_copies_and_noise(rng):
    copies = np.tile(rng.standard_normal(640), (19, 1))
    p = C.plv_matrix(epoch_of(copies))
    off = ~np.eye(19, dtype=bool)
    assert np.all(np.abs(p[off] - 1.0) < 1e-9)
    noise = C.plv_matrix(epoch_of(rng.standard_normal((19, 640))))
    assert noise[off].mean() < 0.2


def test_plv_matrix_matches_pairwise_loop(rng):
    data = rng.standard_normal((19, 640))
    phases = hilbert_phase(data)
    got = C.plv_matrix(epoch_of(data))
    assert np.max(np.abs(got - oracles.plv_loop(phases))) < 1e-12
    for i, j in [(0, 1), (4, 17), (18, 2)]:
        assert abs(got[i, j] - C.plv_pair(phases[i], phases[j])) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 200))
def test_plv_range_and_symmetry(seed, n_t):
    rng = np.random.default_rng(seed)
    phases = rng.uniform(-np.pi, np.pi, (6, n_t))
    p = C.plv_from_phases(phases)
    assert np.all(p >= 0.0) and np.all(p <= 1.0)
    assert np.array_equal(p, p.T) and np.all(np.diag(p) == 0.0)
    assert abs(C.plv_pair(phases[1], phases[3]) - C.plv_pair(phases[3], phases[1])) < 1e-15


# -- top-k ---------------------------------------------------------------------------

def test_topk_complete_graph(rng):
    a = rng.uniform(size=(19, 19))
    a = a + a.T
    assert len(C.topk_sparsify(a, 18)) == 171


def test_topk_perfect_matching():
    n = 19
    pairs = [(2 * m, 2 * m + 1) for m in range(9)]
    a = np.full((n, n), 0.1)
    for i, j in pairs:
        a[i, j] = a[j, i] = 0.9
    a[18, 0] = a[0, 18] = 0.5           # the unmatched node's favourite
    np.fill_diagonal(a, 0.0)
    edges = [tuple(e) for e in C.topk_sparsify(a, 1)]
    assert edges == oracles.topk_union(a.tolist(), 1)
    assert set(pairs) <= set(edges) and len(edges) == 10


def test_topk_ties_use_smaller_index():
    a = np.ones((19, 19))
    np.fill_diagonal(a, 0.0)
    first = C.topk_sparsify(a, 2)
    assert np.array_equal(first, C.topk_sparsify(a.copy(), 2))
    # every node picks the two lowest-index others
    assert [tuple(e) for e in first] == oracles.topk_union(a.tolist(), 2)
    assert (0, 1) in [tuple(e) for e in first] and (17, 18) not in [tuple(e) for e in first]


def test_topk_invalid_k():
    a = np.zeros((19, 19))
    for k in (0, 19):
        with pytest.raises(InvalidK):
            C.topk_sparsify(a, k)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 18))
def test_topk_matches_union_oracle(seed, k):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(19, 19))
    a = np.round(0.5 * (a + a.T), 2)          # rounding forces ties
    np.fill_diagonal(a, 0.0)
    edges = C.topk_sparsify(a, k)
    assert [tuple(e) for e in edges] == oracles.topk_union(a.tolist(), k)
    deg = np.bincount(edges.ravel(), minlength=19)
    assert deg.min() >= k
    if k < 18:
        assert set(map(tuple, edges)) <= set(map(tuple, C.topk_sparsify(a, k + 1)))


# -- graphs ---------------------------------------------------------------------------

def test_build_graph_contents_and_nesting(rng):
    data = rng.standard_normal((19, 1280))
    g = C.build_graph(epoch_of(data), k=2)
    g.validate()
    assert g.label == 1 and g.subject_id == "S7" and g.segment_index == 3
    assert g.node_features.shape == (19, 14)
    plv = C.plv_matrix(epoch_of(data))
    keep = np.zeros((19, 19), dtype=bool)
    keep[g.edges[:, 0], g.edges[:, 1]] = keep[g.edges[:, 1], g.edges[:, 0]] = True
    assert np.array_equal(g.adjacency[keep], plv[keep])
    assert np.all(g.adjacency[~keep] == 0.0)
    full = C.build_graph(epoch_of(data), k=18, features=None)
    assert set(map(tuple, g.edges)) <= set(map(tuple, full.edges))
    again = C.build_graph(epoch_of(data.copy()), k=2)
    assert np.array_equal(again.adjacency, g.adjacency)
    assert np.array_equal(again.node_features, g.node_features)


def test_graph_serialization_round_trip(tmp_path, graphs):
    graphs[0].feature_flags = np.zeros((19, 14), dtype=bool)
    graphs[0].feature_flags[2, 3] = True
    C.save_graphs(graphs, tmp_path / "g")
    back = C.load_graphs(tmp_path / "g")
    assert len(back) == len(graphs)
    for a, b in zip(graphs, back):
        assert np.array_equal(a.node_features, b.node_features)
        assert np.array_equal(a.adjacency, b.adjacency)
        assert np.array_equal(a.edges, b.edges)
        assert (a.label, a.subject_id, a.segment_index) == (b.label, b.subject_id, b.segment_index)
    assert back[0].feature_flags[2, 3] and back[1].feature_flags is None
