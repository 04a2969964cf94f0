import numpy as np
import pytest

from expanet.connectivity import BrainGraph, sparsify_adjacency, topk_sparsify


def random_graph(rng, n=19, n_features=14, k=5, label=0, subject="S0", segment=0):
    """Random 19-node graph: Gaussian features, uniform symmetric PLV matrix."""
    plv = rng.uniform(0.05, 1.0, (n, n))
    plv = 0.5 * (plv + plv.T)
    np.fill_diagonal(plv, 0.0)
    edges = topk_sparsify(plv, k)
    return BrainGraph(node_features=rng.standard_normal((n, n_features)),
                      adjacency=sparsify_adjacency(plv, edges), edges=edges,
                      label=label, subject_id=subject, segment_index=segment)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def graphs(rng):
    return [random_graph(rng, label=i % 2, subject=f"S{i}") for i in range(10)]


def graph_from_adjacency(features, adjacency, label=0, subject="S0", segment=0):
    i, j = np.nonzero(np.triu(adjacency, 1))
    return BrainGraph(node_features=features, adjacency=adjacency,
                      edges=np.stack([i, j], axis=1).astype(np.int64),
                      label=label, subject_id=subject, segment_index=segment)


def permute_graph(g, perm):
    """Relabel nodes so that new node k is old node perm[k]."""
    return graph_from_adjacency(g.node_features[perm], g.adjacency[np.ix_(perm, perm)],
                                g.label, g.subject_id, g.segment_index)


def duplicate_graph(g):
    """Disjoint union of a graph with a copy of itself."""
    n = g.n_nodes
    adj = np.zeros((2 * n, 2 * n))
    adj[:n, :n] = adj[n:, n:] = g.adjacency
    return graph_from_adjacency(np.concatenate([g.node_features, g.node_features]), adj,
                                g.label, g.subject_id, g.segment_index)


# one "PASS/FAIL/SKIP <criterion>: <detail>" line per acceptance criterion
ACCEPTANCE_LINES = []


def record_acceptance(name, ok, detail):
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"{status} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
