"""Full-graph supervised training: weighted cross-entropy, Adam, seeded runs.

Every epoch processes the whole graph in one forward pass, computes the
class-weighted loss over the train mask, backpropagates, and applies one Adam
step. Validation ranking metrics are computed every ``eval_every`` epochs and
the best-validation snapshot is retained alongside the final model.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import (
    EmptyMask,
    NonFiniteLoss,
    NoPositives,
    SingleClass,
    SingleClassMask,
    UnlabeledInMask,
)
from .graph import TransactionGraph, TemporalSplit, UNKNOWN
from .layers import GraphContext, Model, ModelConfig, build_model, save_checkpoint, load_checkpoint
from .metrics import ScoredSet, auprc, auc_roc, illicit_scores
from .rng import RngStream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimisation settings. The tuned search space bounds these values
    (learning rate in [2e-6, 1e-3], epochs in [128, 512], weight decay fixed
    at 5e-4); degenerate values (lr 0, epochs 0) stay legal here so that
    limiting behaviour is testable, and the samplers enforce the full ranges.
    """

    learning_rate: float
    epochs: int
    weight_decay: float = 5e-4
    seed: int = 42
    class_weight_mode: str = "inverse_frequency"
    manual_weights: tuple[float, float] | None = None
    eval_every: int = 10

    def __post_init__(self):
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite non-negative number")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.class_weight_mode not in ("inverse_frequency", "manual"):
            raise ValueError("class_weight_mode must be 'inverse_frequency' or 'manual'")
        if self.class_weight_mode == "manual" and self.manual_weights is None:
            raise ValueError("manual class weighting needs manual_weights=(w0, w1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if data.get("manual_weights") is not None:
            data["manual_weights"] = tuple(data["manual_weights"])
        return cls(**data)


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_auprc: float | None
    val_auc: float | None
    wall_ms: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    HEADER = "epoch,train_loss,val_auprc,val_auc,wall_ms"

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            for r in self.rows:
                val_ap = "" if r.val_auprc is None else f"{r.val_auprc:.17g}"
                val_auc = "" if r.val_auc is None else f"{r.val_auc:.17g}"
                fh.write(f"{r.epoch},{r.train_loss:.17g},{val_ap},{val_auc},{r.wall_ms:.3f}\n")


def class_weights(labels: np.ndarray, mask: np.ndarray, mode: str, manual=None) -> tuple[float, float]:
    """Per-class loss weights: w_c = |mask| / (2 * count_c) for inverse frequency."""
    masked = labels[mask]
    if masked.size == 0:
        raise EmptyMask("class weights need a non-empty mask")
    if mode == "manual":
        w0, w1 = manual
        return float(w0), float(w1)
    n0 = int((masked == 0).sum())
    n1 = int((masked == 1).sum())
    if n0 == 0 or n1 == 0:
        raise SingleClassMask("inverse-frequency weighting needs both classes in the mask")
    total = float(masked.size)
    return total / (2.0 * n0), total / (2.0 * n1)


def weighted_ce_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray, weights: tuple[float, float]) -> Tensor:
    """Class-weighted softmax cross-entropy over the masked nodes.

    loss = -(sum_i w_{y_i} * log p_i[y_i]) / (sum_i w_{y_i})
    """
    w0, w1 = weights
    if w0 <= 0 or w1 <= 0:
        raise ValueError("class weights must be positive")
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise EmptyMask("loss mask selects no nodes")
    y = labels[idx]
    if np.any((y != 0) & (y != 1)):
        raise UnlabeledInMask("loss mask may select labeled nodes only")
    logp = ad.log_softmax(ad.row_select(logits, idx))
    per_node = np.where(y == 0, w0, w1).astype(np.float64)
    picker = np.zeros((idx.size, logits.data.shape[1]))
    picker[np.arange(idx.size), y] = per_node / per_node.sum()
    return ad.scale(ad.reduce_sum(ad.mul(logp, picker)), -1.0)


class AdamState:
    """First/second moment buffers for a named parameter set."""

    def __init__(self, params: list[tuple[str, Tensor]]):
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}
        self.t = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m:{k}": v for k, v in self.m.items()}
        out.update({f"v:{k}": v for k, v in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, params: list[tuple[str, Tensor]], arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls(params)
        for name, _ in params:
            state.m[name][...] = arrays[f"m:{name}"]
            state.v[name][...] = arrays[f"v:{name}"]
        state.t = int(arrays["t"][0])
        return state


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    weight_decay: float,
    t: int,
) -> None:
    """One in-place Adam update with L2 applied through the gradient."""
    g = grad + weight_decay * param if weight_decay else grad
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * g
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * (g * g)
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainResult:
    model: Model
    best_model: Model
    best_epoch: int | None
    best_val_auprc: float | None
    log: TrainLog


class TrainingSession:
    """Incremental trainer; supports resuming so budgeted search can extend runs."""

    def __init__(
        self,
        graph: TransactionGraph,
        train_mask: np.ndarray,
        val_mask: np.ndarray,
        model_config: ModelConfig,
        train_config: TrainConfig,
    ):
        self.graph = graph
        self.ctx = GraphContext(graph)
        self.train_mask = train_mask
        self.val_mask = val_mask
        self.model_config = model_config
        self.train_config = train_config
        self.model = build_model(model_config, graph.feature_dim)
        self.features = Tensor(graph.features)
        self.adam = AdamState(self.model.named_params())
        self.epoch = 0
        self.log = TrainLog()
        self.best_state: dict[str, np.ndarray] | None = None
        self.best_epoch: int | None = None
        self.best_val_auprc: float | None = None
        if train_config.class_weight_mode == "manual":
            self.weights = class_weights(graph.labels, train_mask, "manual", train_config.manual_weights)
        else:
            self.weights = class_weights(graph.labels, train_mask, "inverse_frequency")
        self._rng = RngStream(train_config.seed, ("train",))

    def run(self, until_epoch: int) -> None:
        """Train up to `until_epoch` total epochs (no-op if already there)."""
        cfg = self.train_config
        params = self.model.named_params()
        while self.epoch < until_epoch:
            start = time.perf_counter()
            self.epoch += 1
            epoch_rng = self._rng.child(f"epoch{self.epoch}")
            for _, p in params:
                p.zero_grad()
            with Tape() as tape:
                logits = self.model.forward(self.ctx, self.features, training=True, rng=epoch_rng)
                loss = weighted_ce_loss(logits, self.graph.labels, self.train_mask, self.weights)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NonFiniteLoss(f"training loss became {loss_value} at epoch {self.epoch}")
                tape.backward(loss)
            self.adam.t += 1
            for name, p in params:
                adam_step(
                    p.data, p.grad, self.adam.m[name], self.adam.v[name],
                    cfg.learning_rate, cfg.weight_decay, self.adam.t,
                )
            val_ap = val_auc = None
            if cfg.eval_every > 0 and (self.epoch % cfg.eval_every == 0 or self.epoch == until_epoch):
                val_ap, val_auc = self._validate()
                if val_ap is not None and (self.best_val_auprc is None or val_ap > self.best_val_auprc):
                    self.best_val_auprc = val_ap
                    self.best_epoch = self.epoch
                    self.best_state = self.model.state_arrays()
            wall_ms = (time.perf_counter() - start) * 1000.0
            self.log.rows.append(LogRow(self.epoch, loss_value, val_ap, val_auc, wall_ms))

    def _validate(self) -> tuple[float | None, float | None]:
        if not self.val_mask.any():
            return None, None
        scores = illicit_scores(self.model, self.ctx, self.features)
        labels = self.graph.labels[self.val_mask]
        scored = ScoredSet(scores[self.val_mask], (labels == 0).astype(np.int64))
        try:
            val_ap = auprc(scored)
        except NoPositives:
            val_ap = None
        try:
            val_auc = auc_roc(scored)
        except SingleClass:
            val_auc = None
        return val_ap, val_auc

    def result(self) -> TrainResult:
        if self.best_state is not None:
            best = self.model.clone()
            best.load_state(self.best_state)
        else:
            best = self.model
        return TrainResult(self.model, best, self.best_epoch, self.best_val_auprc, self.log)

    # ---- checkpoint-based resume (keeps Adam moments) ----

    def checkpoint_bytes(self) -> bytes:
        buf = io.BytesIO()
        save_checkpoint(
            buf,
            self.model,
            extra=self.adam.arrays(),
            extra_meta={"epoch": self.epoch},
        )
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model, extra=self.adam.arrays(), extra_meta={"epoch": self.epoch})

    def restore(self, blob: bytes | str | Path) -> None:
        src: BinaryIO | str | Path = io.BytesIO(blob) if isinstance(blob, bytes) else blob
        model, extra, meta = load_checkpoint(src)
        self.model = model
        self.adam = AdamState.from_arrays(model.named_params(), extra)
        self.epoch = int(meta["epoch"])


def train(
    graph: TransactionGraph,
    split: TemporalSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> TrainResult:
    """Train on the split's train mask, tracking validation ranking quality.

    Returns both the final-epoch model and the best-validation snapshot;
    reporting defaults to the best snapshot.
    """
    _check_split_masks(graph, split)
    session = TrainingSession(graph, split.train_mask, split.val_mask, model_config, train_config)
    session.run(train_config.epochs)
    return session.result()


def _check_split_masks(graph: TransactionGraph, split: TemporalSplit) -> None:
    for mask in (split.train_mask, split.val_mask, split.test_mask):
        if mask.shape[0] != graph.num_nodes:
            raise ValueError("split masks do not match the graph")
        if np.any(graph.labels[mask] == UNKNOWN):
            raise UnlabeledInMask("split masks may select labeled nodes only")
