"""Imbalance-aware evaluation.

Positive class is illicit throughout: a ScoredSet carries the predicted
illicit probability and a 0/1 indicator with 1 = illicit. AUPRC is step-wise
average precision with ties grouped at one cut point; AUC-ROC is the
Mann-Whitney statistic with half credit for ties. Robustness is estimated by
repeatedly subsampling the evaluation set without replacement.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .errors import BadFraction, DegenerateSet, NoPositives, SingleClass
from .graph import TransactionGraph
from .layers import GraphContext, Model
from .rng import RngStream

DEFAULT_PERCENTILES = (90.0, 99.0, 99.9)


@dataclass
class ScoredSet:
    """Parallel scores and 0/1 labels (1 = positive = illicit)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be parallel 1-D arrays")
        if self.scores.size == 0:
            raise ValueError("scored set must not be empty")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return self.scores.size

    def subset(self, idx: np.ndarray) -> "ScoredSet":
        return ScoredSet(self.scores[idx], self.labels[idx])


def auprc(scored: ScoredSet) -> float:
    """Average precision: sum of (R_n - R_{n-1}) * P_n over distinct cut points."""
    y, s = scored.labels, scored.scores
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each tie group = a distinct cut point
    boundary = np.flatnonzero(np.diff(s_sorted) != 0)
    boundary = np.append(boundary, s_sorted.size - 1)
    tp = np.cumsum(y_sorted)[boundary].astype(np.float64)
    predicted = (boundary + 1).astype(np.float64)
    precision = tp / predicted
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def auc_roc(scored: ScoredSet) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(equal)."""
    y, s = scored.labels, scored.scores
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC-ROC needs both classes")
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class BootstrapStats:
    mean_auprc: float
    std_auprc: float
    mean_auc: float
    std_auc: float
    n_rounds: int
    frac: float


def bootstrap_eval(scored: ScoredSet, n_rounds: int, frac: float, seed: int) -> BootstrapStats:
    """Repeated subsampling without replacement; mean and population std of
    AUPRC / AUC over rounds. Single-class draws are redrawn, capped at 1000
    retries per round."""
    if n_rounds < 1:
        raise BadFraction("n_rounds must be >= 1")
    if not 0.0 < frac <= 1.0:
        raise BadFraction(f"frac must be in (0, 1], got {frac}")
    n = len(scored)
    size = int(np.floor(frac * n))
    if size < 1:
        raise BadFraction(f"frac {frac} selects no elements from a set of {n}")
    root = RngStream(seed, ("bootstrap",))
    ap_values = np.empty(n_rounds)
    auc_values = np.empty(n_rounds)
    for r in range(n_rounds):
        gen = root.child(str(r)).generator()
        for _ in range(1000):
            idx = gen.choice(n, size=size, replace=False)
            labels = scored.labels[idx]
            if 0 < labels.sum() < size:
                break
        else:
            raise DegenerateSet("could not draw a two-class subsample in 1000 tries")
        sub = scored.subset(idx)
        ap_values[r] = auprc(sub)
        auc_values[r] = auc_roc(sub)
    return BootstrapStats(
        mean_auprc=float(ap_values.mean()),
        std_auprc=float(ap_values.std()),
        mean_auc=float(auc_values.mean()),
        std_auc=float(auc_values.std()),
        n_rounds=n_rounds,
        frac=frac,
    )


@dataclass
class ThresholdRecord:
    percentile: float
    threshold_value: float
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool


def percentile_thresholds(
    scored: ScoredSet, percentiles: tuple[float, ...] = DEFAULT_PERCENTILES
) -> list[ThresholdRecord]:
    """Precision/recall/F1 when predicting positive at score percentiles.

    Thresholds use linear interpolation between order statistics; prediction
    is score >= threshold; zero-division yields 0 with the degenerate flag.
    `support` is the number of predicted positives.
    """
    records = []
    for p in percentiles:
        threshold = float(np.percentile(scored.scores, p, method="linear"))
        predicted = scored.scores >= threshold
        tp = int((predicted & (scored.labels == 1)).sum())
        n_pred = int(predicted.sum())
        n_pos = int(scored.labels.sum())
        degenerate = n_pred == 0 or n_pos == 0
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_pos if n_pos else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        records.append(ThresholdRecord(p, threshold, precision, recall, f1, n_pred, degenerate))
    return records


@dataclass
class EvalReport:
    auprc: float
    auc: float | None
    auc_degenerate: bool
    bootstrap: BootstrapStats | None
    thresholds: list[ThresholdRecord]

    def to_dict(self) -> dict:
        return {
            "auprc": self.auprc,
            "auc": self.auc,
            "auc_degenerate": self.auc_degenerate,
            "bootstrap": None if self.bootstrap is None else asdict(self.bootstrap),
            "thresholds": [asdict(t) for t in self.thresholds],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv_fields(self) -> dict[str, object]:
        """Flat single-row view for tabulation."""
        row: dict[str, object] = {
            "auprc": self.auprc,
            "auc": "" if self.auc is None else self.auc,
        }
        if self.bootstrap is not None:
            row.update(
                {
                    "bootstrap_mean_auprc": self.bootstrap.mean_auprc,
                    "bootstrap_std_auprc": self.bootstrap.std_auprc,
                    "bootstrap_mean_auc": self.bootstrap.mean_auc,
                    "bootstrap_std_auc": self.bootstrap.std_auc,
                }
            )
        else:
            row.update(
                {
                    "bootstrap_mean_auprc": "",
                    "bootstrap_std_auprc": "",
                    "bootstrap_mean_auc": "",
                    "bootstrap_std_auc": "",
                }
            )
        for t in self.thresholds:
            tag = f"p{t.percentile:g}".replace(".", "_")
            row[f"{tag}_precision"] = t.precision
            row[f"{tag}_recall"] = t.recall
            row[f"{tag}_f1"] = t.f1
        return row

    def to_csv(self, path) -> None:
        row = self.csv_fields()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row.keys()))
            writer.writeheader()
            writer.writerow(row)


def illicit_scores(model: Model, ctx: GraphContext, features: ad.Tensor) -> np.ndarray:
    """Eval-mode forward pass; softmax probability of the illicit class (code 0)."""
    logits = model.forward(ctx, features, training=False).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return probs[:, 0]


def scored_set_for_mask(model: Model, graph: TransactionGraph, mask: np.ndarray) -> ScoredSet:
    ctx = GraphContext(graph)
    scores = illicit_scores(model, ctx, ad.Tensor(graph.features))
    labels = (graph.labels[mask] == 0).astype(np.int64)
    return ScoredSet(scores[mask], labels)


def evaluate(
    model: Model,
    graph: TransactionGraph,
    mask: np.ndarray,
    bootstrap_rounds: int = 100,
    bootstrap_frac: float = 0.5,
    seed: int = 42,
) -> EvalReport:
    """Full evaluation of a trained model on one labeled node mask.

    AUC is reported as absent (with a flag) when the mask holds a single
    class; the bootstrap is omitted when the set is too small or too
    degenerate to subsample.
    """
    scored = scored_set_for_mask(model, graph, mask)
    ap = auprc(scored)
    try:
        auc = auc_roc(scored)
        auc_degenerate = False
    except SingleClass:
        auc = None
        auc_degenerate = True
    try:
        boot = bootstrap_eval(scored, bootstrap_rounds, bootstrap_frac, seed)
    except (BadFraction, DegenerateSet, SingleClass):
        boot = None
    return EvalReport(
        auprc=ap,
        auc=auc,
        auc_degenerate=auc_degenerate,
        bootstrap=boot,
        thresholds=percentile_thresholds(scored),
    )


def dump_scores(path, graph: TransactionGraph, mask: np.ndarray, scores: np.ndarray) -> None:
    """Write `node_id,score,label` rows (label 1 = illicit) for masked nodes."""
    reverse = {idx: orig for orig, idx in graph.id_map.items()}
    idx = np.flatnonzero(mask)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "score", "label"])
        for i in idx:
            writer.writerow([reverse[int(i)], f"{scores[i]:.17g}", int(graph.labels[i] == 0)])
