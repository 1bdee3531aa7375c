"""Ablation grid and desk-scale hyperparameter search.

The ablation runs every architecture x {baseline, xavier, graphnorm_xavier}
cell with the tuned per-architecture defaults. Hyperparameter search is
uniform random sampling over the tuned space (log / linear-int /
categorical), optionally budgeted by synchronous successive halving with
checkpoint resume. Search operations receive only the train and validation
masks, so the test set cannot leak into model selection.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import AmlgnnError, BadSchedule
from .graph import TransactionGraph, TemporalSplit
from .layers import AGGREGATORS, ModelConfig, TUNED
from .metrics import evaluate
from .rng import RngStream
from .train import TrainConfig, TrainingSession, train

ABLATION_ARMS = (
    ("baseline", "default", "none"),
    ("xavier", "xavier", "none"),
    ("graphnorm_xavier", "xavier", "graphnorm"),
)


# ---------------------------------------------------------------------------
# search space


@dataclass
class ParamSpec:
    name: str
    kind: str  # log_uniform | linear_int | categorical
    low: float | None = None
    high: float | None = None
    choices: list | None = None

    def __post_init__(self):
        if self.kind in ("log_uniform", "linear_int"):
            if self.low is None or self.high is None or self.low > self.high:
                raise ValueError(f"{self.name}: bounds must satisfy low <= high")
            if self.kind == "log_uniform" and self.low <= 0:
                raise ValueError(f"{self.name}: log-scaled bounds must be positive")
        elif self.kind == "categorical":
            if not self.choices:
                raise ValueError(f"{self.name}: categorical parameters need choices")
        else:
            raise ValueError(f"{self.name}: unknown sampling kind {self.kind!r}")

    def sample(self, gen: np.random.Generator):
        if self.kind == "log_uniform":
            return float(np.exp(gen.uniform(np.log(self.low), np.log(self.high))))
        if self.kind == "linear_int":
            return int(gen.integers(int(self.low), int(self.high) + 1))
        return self.choices[int(gen.integers(len(self.choices)))]


@dataclass
class SearchSpace:
    """Sampled parameters plus fixed settings merged into every trial."""

    params: list[ParamSpec]
    fixed: dict = field(default_factory=dict)

    def sample(self, rng: RngStream) -> dict:
        gen = rng.generator()
        out = {spec.name: spec.sample(gen) for spec in self.params}
        out.update(self.fixed)
        return out

    @classmethod
    def default(cls, layer_type: str) -> "SearchSpace":
        params = [
            ParamSpec("learning_rate", "log_uniform", 2e-6, 1e-3),
            ParamSpec("hidden_dim", "linear_int", 128, 256),
            ParamSpec("embedding_dim", "linear_int", 64, 128),
            ParamSpec("num_layers", "categorical", choices=[1, 2, 3]),
            ParamSpec("dropout", "log_uniform", 0.08, 0.64),
            ParamSpec("epochs", "linear_int", 128, 512),
        ]
        if layer_type == "sage":
            params.append(ParamSpec("sage_aggregator", "categorical", choices=list(AGGREGATORS)))
        return cls(params=params, fixed={"layer_type": layer_type})

    def to_dict(self) -> dict:
        return {"params": [asdict(p) for p in self.params], "fixed": self.fixed}

    @classmethod
    def from_dict(cls, data: dict) -> "SearchSpace":
        return cls(
            params=[ParamSpec(**p) for p in data.get("params", [])],
            fixed=dict(data.get("fixed", {})),
        )

    @classmethod
    def from_json(cls, path) -> "SearchSpace":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


_MODEL_KEYS = (
    "layer_type",
    "num_layers",
    "hidden_dim",
    "embedding_dim",
    "dropout",
    "norm",
    "init",
    "sage_aggregator",
    "gat_heads",
)
_TRAIN_KEYS = ("learning_rate", "epochs", "weight_decay", "eval_every", "class_weight_mode")


def configs_from_params(params: dict, seed: int) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs = {k: params[k] for k in _MODEL_KEYS if k in params}
    train_kwargs = {k: params[k] for k in _TRAIN_KEYS if k in params}
    arch = model_kwargs.get("layer_type")
    tuned = TUNED.get(arch, {})
    train_kwargs.setdefault("learning_rate", tuned.get("learning_rate", 1e-3))
    train_kwargs.setdefault("epochs", tuned.get("epochs", 256))
    return (
        ModelConfig(seed=seed, **model_kwargs),
        TrainConfig(seed=seed, **train_kwargs),
    )


@dataclass
class Trial:
    trial_id: int
    params: dict
    objective: float
    status: str = "ok"
    epochs_trained: int = 0
    wall_ms: float = 0.0
    rung_reached: int = 0
    error: str | None = None


def _trial_objective(session: TrainingSession) -> float:
    value = session.best_val_auprc
    return float(value) if value is not None else float("-inf")


def random_search(
    graph: TransactionGraph,
    train_mask: np.ndarray,
    val_mask: np.ndarray,
    space: SearchSpace,
    n_trials: int,
    seed: int = 42,
) -> list[Trial]:
    """Uniform random search; returns trials sorted by validation AUPRC."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    trials: list[Trial] = []
    for i in range(n_trials):
        params = space.sample(RngStream(seed, ("hpo", "sample", str(i))))
        start = time.perf_counter()
        try:
            model_config, train_config = configs_from_params(params, seed)
            session = TrainingSession(graph, train_mask, val_mask, model_config, train_config)
            session.run(train_config.epochs)
            trial = Trial(i, params, _trial_objective(session), epochs_trained=session.epoch)
        except AmlgnnError as exc:
            trial = Trial(i, params, float("-inf"), status="failed", error=str(exc))
        trial.wall_ms = (time.perf_counter() - start) * 1000.0
        trials.append(trial)
    trials.sort(key=lambda t: -t.objective)
    return trials


def successive_halving(
    graph: TransactionGraph,
    train_mask: np.ndarray,
    val_mask: np.ndarray,
    space: SearchSpace,
    n_initial: int,
    rungs: int,
    keep_frac: float,
    budget_schedule: list[int],
    seed: int = 42,
) -> list[Trial]:
    """Synchronous successive halving over cumulative epoch budgets.

    Rung r extends every surviving run to budget_schedule[r] total epochs
    (resuming through a checkpoint round trip so Adam moments persist), ranks
    by validation AUPRC, and keeps ceil(keep_frac * survivors), at least one.
    """
    if n_initial < 2:
        raise BadSchedule("successive halving needs n_initial >= 2")
    if not 0.0 < keep_frac < 1.0:
        raise BadSchedule("keep_frac must be in (0, 1)")
    if len(budget_schedule) != rungs:
        raise BadSchedule("budget_schedule must provide one epoch budget per rung")
    if any(b <= 0 for b in budget_schedule) or any(
        b2 <= b1 for b1, b2 in zip(budget_schedule, budget_schedule[1:])
    ):
        raise BadSchedule("budget_schedule must be strictly increasing positive epoch counts")

    sessions: dict[int, TrainingSession] = {}
    trials: list[Trial] = []
    for i in range(n_initial):
        params = space.sample(RngStream(seed, ("hpo", "sample", str(i))))
        trial = Trial(i, params, float("-inf"))
        try:
            model_config, train_config = configs_from_params(params, seed)
            train_config.epochs = budget_schedule[-1]
            sessions[i] = TrainingSession(graph, train_mask, val_mask, model_config, train_config)
        except AmlgnnError as exc:
            trial.status = "failed"
            trial.error = str(exc)
        trials.append(trial)

    survivors = [t for t in trials if t.status == "ok"]
    for rung, budget in enumerate(budget_schedule):
        still_ok = []
        for trial in survivors:
            session = sessions[trial.trial_id]
            start = time.perf_counter()
            try:
                if session.epoch > 0:
                    session.restore(session.checkpoint_bytes())
                session.run(budget)
                trial.objective = _trial_objective(session)
                trial.epochs_trained = session.epoch
                trial.rung_reached = rung + 1
                still_ok.append(trial)
            except AmlgnnError as exc:
                trial.status = "failed"
                trial.objective = float("-inf")
                trial.error = str(exc)
            trial.wall_ms += (time.perf_counter() - start) * 1000.0
        still_ok.sort(key=lambda t: -t.objective)
        keep = max(1, int(np.ceil(keep_frac * len(still_ok)))) if still_ok else 0
        survivors = still_ok[:keep]
    trials.sort(key=lambda t: (-t.rung_reached, -t.objective))
    return trials


def trials_to_csv(path, trials: list[Trial]) -> None:
    param_names = sorted({name for t in trials for name in t.params})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["trial_id", "status", "objective_val_auprc", "epochs_trained", "rung_reached", "wall_ms"]
            + param_names
        )
        for t in trials:
            objective = "" if t.objective == float("-inf") else f"{t.objective:.17g}"
            writer.writerow(
                [t.trial_id, t.status, objective, t.epochs_trained, t.rung_reached, f"{t.wall_ms:.3f}"]
                + [t.params.get(name, "") for name in param_names]
            )


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationGrid:
    """architectures x arms, with per-cell config overrides for desk-scale runs."""

    architectures: tuple[str, ...] = ("gcn", "gat", "sage")
    arms: tuple[tuple[str, str, str], ...] = ABLATION_ARMS
    model_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "architectures": list(self.architectures),
            "arms": [list(a) for a in self.arms],
            "model_overrides": self.model_overrides,
            "train_overrides": self.train_overrides,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AblationGrid":
        return cls(
            architectures=tuple(data.get("architectures", ("gcn", "gat", "sage"))),
            arms=tuple(tuple(a) for a in data.get("arms", ABLATION_ARMS)),
            model_overrides=dict(data.get("model_overrides", {})),
            train_overrides=dict(data.get("train_overrides", {})),
        )

    @classmethod
    def from_json(cls, path) -> "AblationGrid":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def cell_configs(self, arch: str, arm: tuple[str, str, str], seed: int):
        _, init, norm = arm
        model_config = ModelConfig(layer_type=arch, init=init, norm=norm, seed=seed, **self.model_overrides)
        tuned = TUNED[arch]
        train_kwargs = {
            "learning_rate": tuned["learning_rate"],
            "epochs": tuned["epochs"],
        }
        train_kwargs.update(self.train_overrides)
        return model_config, TrainConfig(seed=seed, **train_kwargs)


@dataclass
class AblationRun:
    architecture: str
    arm: str
    seed: int
    status: str
    auc: float | None = None
    auprc: float | None = None
    bootstrap_mean_auprc: float | None = None
    bootstrap_std_auprc: float | None = None
    bootstrap_mean_auc: float | None = None
    bootstrap_std_auc: float | None = None
    best_epoch: int | None = None
    error: str | None = None


@dataclass
class AblationResult:
    runs: list[AblationRun]
    architectures: tuple[str, ...]
    arm_names: tuple[str, ...]

    def aggregate(self) -> dict[tuple[str, str], dict[str, float]]:
        """Mean/std of full-set AUC and AUPRC per (architecture, arm)."""
        out: dict[tuple[str, str], dict[str, float]] = {}
        for arch in self.architectures:
            for arm in self.arm_names:
                values = [
                    r for r in self.runs if r.architecture == arch and r.arm == arm and r.status == "ok"
                ]
                if not values:
                    continue
                auc = np.array([r.auc for r in values if r.auc is not None], dtype=np.float64)
                ap = np.array([r.auprc for r in values], dtype=np.float64)
                out[(arch, arm)] = {
                    "auc_mean": float(auc.mean()) if auc.size else float("nan"),
                    "auc_std": float(auc.std()) if auc.size else float("nan"),
                    "auprc_mean": float(ap.mean()),
                    "auprc_std": float(ap.std()),
                    "n": len(values),
                }
        return out

    def write_table_csv(self, path, include_std: bool | None = None) -> None:
        """Grid-shaped table: one row per architecture, AUC/AUPRC per arm."""
        agg = self.aggregate()
        n_seeds = len({r.seed for r in self.runs})
        if include_std is None:
            include_std = n_seeds > 1
        header = ["model"]
        for arm in self.arm_names:
            header += [f"{arm}_auc", f"{arm}_auprc"]
            if include_std:
                header += [f"{arm}_auc_std", f"{arm}_auprc_std"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for arch in self.architectures:
                row: list[object] = [arch]
                for arm in self.arm_names:
                    cell = agg.get((arch, arm))
                    if cell is None:
                        row += ["", ""] + (["", ""] if include_std else [])
                        continue
                    row += [f"{cell['auc_mean']:.17g}", f"{cell['auprc_mean']:.17g}"]
                    if include_std:
                        row += [f"{cell['auc_std']:.17g}", f"{cell['auprc_std']:.17g}"]
                writer.writerow(row)

    def write_runs_csv(self, path) -> None:
        fields = [
            "architecture", "arm", "seed", "status", "auc", "auprc",
            "bootstrap_mean_auprc", "bootstrap_std_auprc",
            "bootstrap_mean_auc", "bootstrap_std_auc", "best_epoch", "error",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for r in self.runs:
                writer.writerow(["" if getattr(r, f) is None else getattr(r, f) for f in fields])


def run_ablation(
    graph: TransactionGraph,
    split: TemporalSplit,
    grid: AblationGrid,
    seeds: list[int],
) -> AblationResult:
    """Train and evaluate every grid cell per seed; test-set metrics come from
    the best-validation snapshot. A failing cell is recorded and skipped."""
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    runs: list[AblationRun] = []
    for arch in grid.architectures:
        for arm in grid.arms:
            arm_name = arm[0]
            for seed in seeds:
                try:
                    model_config, train_config = grid.cell_configs(arch, arm, seed)
                    result = train(graph, split, model_config, train_config)
                    report = evaluate(result.best_model, graph, split.test_mask, seed=seed)
                    runs.append(
                        AblationRun(
                            architecture=arch,
                            arm=arm_name,
                            seed=seed,
                            status="ok",
                            auc=report.auc,
                            auprc=report.auprc,
                            bootstrap_mean_auprc=None if report.bootstrap is None else report.bootstrap.mean_auprc,
                            bootstrap_std_auprc=None if report.bootstrap is None else report.bootstrap.std_auprc,
                            bootstrap_mean_auc=None if report.bootstrap is None else report.bootstrap.mean_auc,
                            bootstrap_std_auc=None if report.bootstrap is None else report.bootstrap.std_auc,
                            best_epoch=result.best_epoch,
                        )
                    )
                except AmlgnnError as exc:
                    runs.append(
                        AblationRun(architecture=arch, arm=arm_name, seed=seed, status="failed", error=str(exc))
                    )
    return AblationResult(
        runs=runs,
        architectures=tuple(grid.architectures),
        arm_names=tuple(a[0] for a in grid.arms),
    )
