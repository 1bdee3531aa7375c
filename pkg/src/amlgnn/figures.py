"""Render figures from emitted CSV/JSON artifacts.

Each renderer consumes a file the pipeline already wrote (training log,
ablation table, evaluation report, score dump, trial table), so figures are
always reproducible from the delimited outputs alone.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def training_curves(log_csv, out_path) -> Path:
    """Loss and validation-score trajectories from a training log CSV."""
    epochs, losses, val_epochs, val_ap, val_auc = [], [], [], [], []
    with open(log_csv) as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            losses.append(float(row["train_loss"]))
            if row["val_auprc"]:
                val_epochs.append(int(row["epoch"]))
                val_ap.append(float(row["val_auprc"]))
                val_auc.append(float(row["val_auc"]) if row["val_auc"] else np.nan)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, losses, lw=1.2)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax1.set_title("Training loss")
    if val_epochs:
        ax2.plot(val_epochs, val_ap, lw=1.2, label="val AUPRC")
        ax2.plot(val_epochs, val_auc, lw=1.2, label="val AUC")
        ax2.legend()
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("score")
    ax2.set_title("Validation scores")
    return _save(fig, out_path)


def ablation_bars(table_csv, out_path) -> Path:
    """Grouped bars of AUC and AUPRC per architecture and arm."""
    with open(table_csv) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{table_csv} holds no rows")
    arms = sorted({c[: -len("_auprc")] for c in rows[0] if c.endswith("_auprc") and not c.endswith("_std")})
    models = [r["model"] for r in rows]
    x = np.arange(len(models))
    width = 0.8 / max(len(arms), 1)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8), sharey=False)
    for ax, metric in zip(axes, ("auprc", "auc")):
        for k, arm in enumerate(arms):
            values = [float(r[f"{arm}_{metric}"]) if r[f"{arm}_{metric}"] else np.nan for r in rows]
            ax.bar(x + (k - (len(arms) - 1) / 2) * width, values, width, label=arm)
        ax.set_xticks(x, models)
        ax.set_ylabel(metric.upper())
        ax.set_title(f"{metric.upper()} by architecture and arm")
    axes[0].legend(fontsize=8)
    return _save(fig, out_path)


def threshold_tradeoff(report_json, out_path) -> Path:
    """Precision vs recall at the report's percentile operating points."""
    with open(report_json) as fh:
        report = json.load(fh)
    records = report.get("thresholds", [])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for rec in records:
        ax.scatter(rec["recall"], rec["precision"], s=40)
        ax.annotate(
            f"p{rec['percentile']:g}",
            (rec["recall"], rec["precision"]),
            textcoords="offset points",
            xytext=(6, 4),
            fontsize=8,
        )
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("Operating points at score percentiles")
    return _save(fig, out_path)


def pr_curve(scores_csv, out_path) -> Path:
    """Full precision-recall curve from a node score dump."""
    scores, labels = [], []
    with open(scores_csv) as fh:
        for row in csv.DictReader(fh):
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    s = np.asarray(scores)
    y = np.asarray(labels)
    order = np.argsort(-s, kind="mergesort")
    tp = np.cumsum(y[order])
    k = np.arange(1, y.size + 1)
    precision = tp / k
    recall = tp / max(int(y.sum()), 1)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.step(recall, precision, where="post", lw=1.2)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title("Precision-recall curve")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    return _save(fig, out_path)


def search_history(trials_csv, out_path) -> Path:
    """Objective per trial and the running best."""
    ids, objectives = [], []
    with open(trials_csv) as fh:
        for row in csv.DictReader(fh):
            if row["objective_val_auprc"]:
                ids.append(int(row["trial_id"]))
                objectives.append(float(row["objective_val_auprc"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if ids:
        order = np.argsort(ids)
        ids_arr = np.asarray(ids)[order]
        obj_arr = np.asarray(objectives)[order]
        ax.scatter(ids_arr, obj_arr, s=16, label="trial")
        ax.plot(ids_arr, np.maximum.accumulate(obj_arr), lw=1.2, color="tab:orange", label="best so far")
        ax.legend(fontsize=8)
    ax.set_xlabel("trial")
    ax.set_ylabel("validation AUPRC")
    ax.set_title("Search history")
    return _save(fig, out_path)
