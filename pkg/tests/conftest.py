"""Shared fixtures and independent oracles used across the test suite."""

import numpy as np
import pytest

from amlgnn import Tape, TransactionGraph, synth_graph
from amlgnn.graph import build_csr


# ---------------------------------------------------------------------------
# graph construction helpers


def make_graph(n, edges, labels, steps, features=None, feat_dim=3, seed=0):
    """Build a TransactionGraph directly from an undirected edge list."""
    if edges:
        src = np.array([e[0] for e in edges], dtype=np.int64)
        dst = np.array([e[1] for e in edges], dtype=np.int64)
    else:
        src = dst = np.empty(0, dtype=np.int64)
    offsets, cols = build_csr(n, src, dst)
    if features is None:
        features = np.random.default_rng(seed).normal(size=(n, feat_dim))
    graph = TransactionGraph(
        num_nodes=n,
        csr_offsets=offsets,
        csr_neighbors=cols,
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        time_steps=np.asarray(steps, dtype=np.int64),
        id_map={i: i for i in range(n)},
    )
    graph.validate()
    return graph


def permute_graph(graph, perm):
    """Relabel nodes by permutation array: new index = perm[old index]."""
    perm = np.asarray(perm, dtype=np.int64)
    rows = np.repeat(np.arange(graph.num_nodes, dtype=np.int64), graph.degrees())
    edges = list(zip(perm[rows].tolist(), perm[graph.csr_neighbors].tolist()))
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    return make_graph(
        graph.num_nodes,
        edges,
        graph.labels[inverse],
        graph.time_steps[inverse],
        features=graph.features[inverse],
    )


@pytest.fixture
def small_graph():
    g = synth_graph(seed=11, n_nodes=30, n_steps=3, illicit_frac=0.3, unknown_frac=0.2,
                    feat_dim=4, homophily=0.6)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def gradcheck(make_loss, params, h=1e-5):
    """Worst elementwise relative error between tape gradients and central
    finite differences of the scalar loss. `make_loss` must rebuild the loss
    from the current parameter values; it runs untaped for the probes."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = make_loss().item()
            flat[j] = orig - h
            down = make_loss().item()
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, relative_error(fd, grad[j]))
    return worst


# ---------------------------------------------------------------------------
# brute-force metric oracles (independent of the library implementations)


def ap_oracle(scores, labels):
    """Average precision via an explicit loop over every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    assert n_pos > 0
    ap = 0.0
    prev_recall = 0.0
    for t in np.unique(scores)[::-1]:
        predicted = scores >= t
        tp = int((predicted & (labels == 1)).sum())
        precision = tp / int(predicted.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def auc_oracle(scores, labels):
    """AUC via enumeration of every positive-negative pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    assert pos.size and neg.size
    wins = float((pos[:, None] > neg[None, :]).sum())
    ties = float((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def random_scored_set(rng, max_size=500, heavy_ties=False):
    n = int(rng.integers(5, max_size + 1))
    if heavy_ties:
        scores = rng.choice(np.round(rng.random(4), 3), size=n)
    else:
        scores = rng.random(n)
    labels = (rng.random(n) < 0.3).astype(np.int64)
    if labels.sum() == 0:
        labels[int(rng.integers(n))] = 1
    if labels.sum() == n:
        labels[int(rng.integers(n))] = 0
    return scores, labels
