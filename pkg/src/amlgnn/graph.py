"""Transaction graph ingestion, synthesis, temporal splits, and the on-disk cache.

The stored graph is an undirected CSR: every undirected edge appears as two
directed slots, self-loops are dropped, duplicates removed, and neighbor
lists are sorted. Labels are encoded 0 = illicit, 1 = licit, 2 = unknown.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .container import read_container, write_container
from .errors import (
    BadFraction,
    BadPartition,
    EmptyGraph,
    MalformedCsv,
    UnknownTxId,
)
from .rng import RngStream

log = logging.getLogger(__name__)

ILLICIT, LICIT, UNKNOWN = 0, 1, 2
EXPECTED_FEATURE_DIM = 166

CACHE_MAGIC = b"TXGCACHE"
CACHE_VERSION = 1


@dataclass
class TransactionGraph:
    """Undirected transaction graph in CSR form with node features and labels."""

    num_nodes: int
    csr_offsets: np.ndarray
    csr_neighbors: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    time_steps: np.ndarray
    id_map: dict[int, int] = field(repr=False)
    cross_step_edges: int = 0

    @property
    def num_undirected_edges(self) -> int:
        return self.csr_neighbors.shape[0] // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def max_step(self) -> int:
        return int(self.time_steps.max())

    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def neighbors(self, i: int) -> np.ndarray:
        return self.csr_neighbors[self.csr_offsets[i] : self.csr_offsets[i + 1]]

    def validate(self) -> None:
        """Check the structural invariants by direct CSR scan."""
        n = self.num_nodes
        offsets, cols = self.csr_offsets, self.csr_neighbors
        assert offsets.shape == (n + 1,) and offsets[0] == 0
        assert np.all(np.diff(offsets) >= 0), "offsets must be non-decreasing"
        assert offsets[-1] == cols.shape[0]
        if cols.size:
            assert cols.min() >= 0 and cols.max() < n
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(offsets))
        assert not np.any(rows == cols), "self-loops are not stored"
        pairs = rows * n + cols
        assert np.unique(pairs).size == pairs.size, "duplicate neighbor entries"
        reverse = np.sort(cols * n + rows)
        assert np.array_equal(np.sort(pairs), reverse), "adjacency must be symmetric"
        assert np.isin(self.labels, (ILLICIT, LICIT, UNKNOWN)).all()
        assert self.time_steps.min() >= 1


@dataclass
class TemporalSplit:
    """Leak-free temporal node masks; masks select labeled nodes only."""

    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    train_steps: tuple[int, int]
    val_steps: tuple[int, int]
    test_steps: tuple[int, int]

    def mask_for(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[name]
        except KeyError:
            raise ValueError(f"unknown split name {name!r}") from None


def build_csr(num_nodes: int, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrise directed edges into sorted CSR, dropping self-loops and duplicates."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    if rows.size:
        pairs = np.unique(rows * num_nodes + cols)
        rows, cols = pairs // num_nodes, pairs % num_nodes
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
    return offsets, cols.astype(np.int64)


def load_elliptic(features_path, classes_path, edges_path) -> TransactionGraph:
    """Build a TransactionGraph from the three Elliptic-format CSV files.

    Parameters
    ----------
    features_path : headerless CSV; column 0 = transaction id, column 1 =
        time step, remaining columns = numeric features.
    classes_path : CSV with header ``txId,class``; class is "1" (illicit),
        "2" (licit) or "unknown".
    edges_path : CSV with header ``txId1,txId2``; one directed edge per row.

    The time-step column is extracted into ``time_steps`` and excluded from
    the feature matrix. Edges referencing ids absent from the features file
    raise UnknownTxId.
    """
    try:
        feats = pd.read_csv(features_path, header=None)
    except pd.errors.EmptyDataError:
        raise EmptyGraph(f"features file {features_path} is empty") from None
    except (pd.errors.ParserError, ValueError) as exc:
        raise MalformedCsv(f"cannot parse {features_path}: {exc}") from None
    if feats.shape[1] < 3:
        raise MalformedCsv("features file needs id, time step, and at least one feature column")
    if not all(np.issubdtype(dt, np.number) for dt in feats.dtypes):
        raise MalformedCsv("features file contains non-numeric fields")
    if feats.isna().any().any():
        raise MalformedCsv("features file has missing fields (short row or empty cell)")
    if feats.shape[0] == 0:
        raise EmptyGraph("features file has no rows")

    tx_ids = feats.iloc[:, 0].to_numpy()
    if not np.all(tx_ids == tx_ids.astype(np.int64)):
        raise MalformedCsv("transaction ids must be integers")
    tx_ids = tx_ids.astype(np.int64)
    if np.unique(tx_ids).size != tx_ids.size:
        raise MalformedCsv("duplicate transaction ids in features file")
    time_steps = feats.iloc[:, 1].to_numpy()
    if not np.all(time_steps == time_steps.astype(np.int64)) or time_steps.min() < 1:
        raise MalformedCsv("time steps must be integers >= 1")
    time_steps = time_steps.astype(np.int64)
    features = np.ascontiguousarray(feats.iloc[:, 2:].to_numpy(dtype=np.float64))
    if features.shape[1] != EXPECTED_FEATURE_DIM:
        log.warning(
            "feature dimension is %d (expected %d); proceeding with the file's value",
            features.shape[1],
            EXPECTED_FEATURE_DIM,
        )

    n = tx_ids.shape[0]
    id_map = {int(t): i for i, t in enumerate(tx_ids)}
    id_index = pd.Series(np.arange(n, dtype=np.int64), index=tx_ids)

    labels = np.full(n, UNKNOWN, dtype=np.int64)
    try:
        classes = pd.read_csv(classes_path, dtype=str)
    except pd.errors.EmptyDataError:
        classes = pd.DataFrame(columns=["txId", "class"])
    except (pd.errors.ParserError, ValueError) as exc:
        raise MalformedCsv(f"cannot parse {classes_path}: {exc}") from None
    if classes.shape[1] != 2:
        raise MalformedCsv("classes file must have exactly two columns")
    if classes.shape[0]:
        class_ids = _int_column(classes.iloc[:, 0], "classes txId")
        idx = id_index.reindex(class_ids).to_numpy(dtype=np.float64)
        if np.isnan(idx).any():
            bad = class_ids[int(np.flatnonzero(np.isnan(idx))[0])]
            raise UnknownTxId(f"classes file references unknown transaction id {bad}")
        codes = classes.iloc[:, 1].map({"1": ILLICIT, "2": LICIT, "unknown": UNKNOWN})
        if codes.isna().any():
            bad = classes.iloc[int(codes.isna().idxmax()), 1]
            raise MalformedCsv(f"unknown class label {bad!r}")
        labels[idx.astype(np.int64)] = codes.to_numpy(dtype=np.int64)

    try:
        edges = pd.read_csv(edges_path)
    except pd.errors.EmptyDataError:
        edges = pd.DataFrame(columns=["txId1", "txId2"])
    except (pd.errors.ParserError, ValueError) as exc:
        raise MalformedCsv(f"cannot parse {edges_path}: {exc}") from None
    if edges.shape[1] != 2:
        raise MalformedCsv("edge list must have exactly two columns")
    if edges.shape[0]:
        raw_src = _int_column(edges.iloc[:, 0], "edge endpoint")
        raw_dst = _int_column(edges.iloc[:, 1], "edge endpoint")
        src_f = id_index.reindex(raw_src).to_numpy(dtype=np.float64)
        dst_f = id_index.reindex(raw_dst).to_numpy(dtype=np.float64)
        missing = np.isnan(src_f) | np.isnan(dst_f)
        if missing.any():
            k = int(np.flatnonzero(missing)[0])
            bad = raw_src[k] if np.isnan(src_f[k]) else raw_dst[k]
            raise UnknownTxId(f"edge endpoint {bad} absent from features file")
        src, dst = src_f.astype(np.int64), dst_f.astype(np.int64)
    else:
        src = dst = np.empty(0, dtype=np.int64)

    offsets, cols = build_csr(n, src, dst)
    graph = TransactionGraph(
        num_nodes=n,
        csr_offsets=offsets,
        csr_neighbors=cols,
        features=features,
        labels=labels,
        time_steps=time_steps,
        id_map=id_map,
        cross_step_edges=_count_cross_step(offsets, cols, time_steps),
    )
    return graph


def _int_column(col: pd.Series, what: str) -> np.ndarray:
    try:
        values = pd.to_numeric(col)
    except (TypeError, ValueError) as exc:
        raise MalformedCsv(f"{what} must be numeric: {exc}") from None
    arr = values.to_numpy()
    if not np.all(arr == arr.astype(np.int64)):
        raise MalformedCsv(f"{what} must be integral")
    return arr.astype(np.int64)


def _count_cross_step(offsets, cols, time_steps) -> int:
    # input data promises edges stay within a time step; count violations, keep the edges
    rows = np.repeat(np.arange(offsets.shape[0] - 1, dtype=np.int64), np.diff(offsets))
    crossing = int(np.sum(time_steps[rows] != time_steps[cols]) // 2)
    if crossing:
        log.warning("%d undirected edges cross time steps", crossing)
    return crossing


def temporal_split(graph: TransactionGraph, n_train: int, n_val: int, n_test: int) -> TemporalSplit:
    """Partition [1, T] into contiguous train/val/test step ranges.

    Masks select labeled nodes only; unlabeled nodes stay in the graph for
    message passing but belong to no split.
    """
    t_max = graph.max_step
    if min(n_train, n_val, n_test) < 1 or n_train + n_val + n_test != t_max:
        raise BadPartition(
            f"split counts ({n_train}, {n_val}, {n_test}) must each be >= 1 and sum to T={t_max}"
        )
    labeled = graph.labels != UNKNOWN
    steps = graph.time_steps
    ranges = {
        "train": (1, n_train),
        "val": (n_train + 1, n_train + n_val),
        "test": (n_train + n_val + 1, t_max),
    }
    masks = {
        name: labeled & (steps >= lo) & (steps <= hi) for name, (lo, hi) in ranges.items()
    }
    return TemporalSplit(
        train_mask=masks["train"],
        val_mask=masks["val"],
        test_mask=masks["test"],
        train_steps=ranges["train"],
        val_steps=ranges["val"],
        test_steps=ranges["test"],
    )


def synth_graph(
    seed: int,
    n_nodes: int,
    n_steps: int,
    illicit_frac: float,
    unknown_frac: float,
    feat_dim: int,
    homophily: float,
    avg_degree: float = 4.0,
) -> TransactionGraph:
    """Generate a desk-scale synthetic transaction graph.

    Nodes are assigned round-robin to time steps; edges are generated only
    within a step. Each node carries a latent class (illicit/licit) drawn at
    the labeled-population prevalence; features are class-conditional
    Gaussians so the task is learnable, and `homophily` is the probability
    that an edge endpoint is drawn from the same latent class. A
    `unknown_frac` share of nodes hides its label as unknown. Deterministic
    for a fixed seed.
    """
    for name, frac in (("illicit_frac", illicit_frac), ("unknown_frac", unknown_frac), ("homophily", homophily)):
        if not 0.0 <= frac <= 1.0:
            raise BadFraction(f"{name} must be in [0, 1], got {frac}")
    if illicit_frac + unknown_frac > 1.0:
        raise BadFraction("illicit_frac + unknown_frac must not exceed 1")
    if n_nodes < n_steps:
        raise ValueError("need at least one node per time step")

    root = RngStream(seed, ("synth",))
    time_steps = 1 + np.arange(n_nodes, dtype=np.int64) % n_steps

    known = 1.0 - unknown_frac
    p_latent_illicit = illicit_frac / known if known > 0 else 0.0
    latent = (root.child("latent").generator().random(n_nodes) < p_latent_illicit).astype(np.int64)
    hidden = root.child("hidden").generator().random(n_nodes) < unknown_frac
    labels = np.where(hidden, UNKNOWN, np.where(latent == 1, ILLICIT, LICIT)).astype(np.int64)

    means = root.child("means").generator().normal(size=(2, feat_dim))
    noise = root.child("noise").generator().normal(size=(n_nodes, feat_dim))
    features = means[latent] + noise

    src_list: list[int] = []
    dst_list: list[int] = []
    for step in range(1, n_steps + 1):
        members = np.flatnonzero(time_steps == step)
        if members.size < 2:
            continue
        gen = root.child("edges", str(step)).generator()
        same = [members[latent[members] == c] for c in (0, 1)]
        n_edges = int(round(avg_degree * members.size / 2.0))
        for _ in range(n_edges):
            u = int(members[gen.integers(members.size)])
            pool = same[latent[u]] if gen.random() < homophily else same[1 - latent[u]]
            if pool.size == 0 or (pool.size == 1 and pool[0] == u):
                pool = members
            v = int(pool[gen.integers(pool.size)])
            while v == u:
                v = int(members[gen.integers(members.size)])
            src_list.append(u)
            dst_list.append(v)

    offsets, cols = build_csr(n_nodes, np.array(src_list, dtype=np.int64), np.array(dst_list, dtype=np.int64))
    return TransactionGraph(
        num_nodes=n_nodes,
        csr_offsets=offsets,
        csr_neighbors=cols,
        features=features,
        labels=labels,
        time_steps=time_steps,
        id_map={i: i for i in range(n_nodes)},
    )


@dataclass
class GraphStats:
    num_nodes: int
    num_undirected_edges: int
    label_counts: dict[str, int]
    degree_min: int
    degree_mean: float
    degree_max: int
    nodes_per_step: dict[int, int]
    edge_homophily: float | None
    cross_step_edges: int

    def to_dict(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "num_undirected_edges": self.num_undirected_edges,
            "label_counts": self.label_counts,
            "degree_min": self.degree_min,
            "degree_mean": self.degree_mean,
            "degree_max": self.degree_max,
            "nodes_per_step": {str(k): v for k, v in self.nodes_per_step.items()},
            "edge_homophily": self.edge_homophily,
            "cross_step_edges": self.cross_step_edges,
        }


def graph_stats(graph: TransactionGraph) -> GraphStats:
    """Summary counts, degree distribution, and edge homophily.

    Homophily is the fraction of undirected edges whose endpoints are both
    labeled and share the same label; None when no such edge exists.
    """
    degrees = graph.degrees()
    labels = graph.labels
    rows = np.repeat(np.arange(graph.num_nodes, dtype=np.int64), degrees)
    cols = graph.csr_neighbors
    both_labeled = (labels[rows] != UNKNOWN) & (labels[cols] != UNKNOWN)
    n_labeled_edges = int(both_labeled.sum())
    if n_labeled_edges:
        same = labels[rows[both_labeled]] == labels[cols[both_labeled]]
        homophily = float(same.sum() / n_labeled_edges)
    else:
        homophily = None
    steps, counts = np.unique(graph.time_steps, return_counts=True)
    return GraphStats(
        num_nodes=graph.num_nodes,
        num_undirected_edges=graph.num_undirected_edges,
        label_counts={
            "illicit": int((labels == ILLICIT).sum()),
            "licit": int((labels == LICIT).sum()),
            "unknown": int((labels == UNKNOWN).sum()),
        },
        degree_min=int(degrees.min()) if degrees.size else 0,
        degree_mean=float(degrees.mean()) if degrees.size else 0.0,
        degree_max=int(degrees.max()) if degrees.size else 0,
        nodes_per_step={int(s): int(c) for s, c in zip(steps, counts)},
        edge_homophily=homophily,
        cross_step_edges=graph.cross_step_edges,
    )


def save_graph(graph: TransactionGraph, path) -> None:
    original_ids = np.empty(graph.num_nodes, dtype=np.int64)
    for orig, idx in graph.id_map.items():
        original_ids[idx] = orig
    write_container(
        path,
        CACHE_MAGIC,
        CACHE_VERSION,
        {
            "csr_offsets": graph.csr_offsets.astype(np.int64),
            "csr_neighbors": graph.csr_neighbors.astype(np.int64),
            "features": graph.features,
            "labels": graph.labels.astype(np.int64),
            "time_steps": graph.time_steps.astype(np.int64),
            "original_ids": original_ids,
        },
        meta={"cross_step_edges": graph.cross_step_edges},
    )


def load_graph(path) -> TransactionGraph:
    _, arrays, meta = read_container(path, CACHE_MAGIC, CACHE_VERSION)
    original_ids = arrays["original_ids"]
    return TransactionGraph(
        num_nodes=original_ids.shape[0],
        csr_offsets=arrays["csr_offsets"],
        csr_neighbors=arrays["csr_neighbors"],
        features=arrays["features"],
        labels=arrays["labels"],
        time_steps=arrays["time_steps"],
        id_map={int(t): i for i, t in enumerate(original_ids)},
        cross_step_edges=int(meta.get("cross_step_edges", 0)),
    )
