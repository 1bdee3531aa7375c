"""Graph neural network anomaly detection on temporal transaction graphs."""

__version__ = "0.1.0"

from .graph import (
    TransactionGraph,
    TemporalSplit,
    graph_stats,
    load_elliptic,
    load_graph,
    save_graph,
    synth_graph,
    temporal_split,
)
from .autodiff import SparseAdj, Tape, Tensor, backward, parameter
from .layers import (
    GraphContext,
    Model,
    ModelConfig,
    build_model,
    kaiming_uniform,
    load_checkpoint,
    save_checkpoint,
    xavier_uniform,
)
from .train import TrainConfig, TrainResult, TrainingSession, adam_step, class_weights, train, weighted_ce_loss
from .metrics import (
    EvalReport,
    ScoredSet,
    auc_roc,
    auprc,
    bootstrap_eval,
    evaluate,
    percentile_thresholds,
)
from .search import AblationGrid, SearchSpace, random_search, run_ablation, successive_halving

__all__ = [
    "__version__",
    "TransactionGraph",
    "TemporalSplit",
    "graph_stats",
    "load_elliptic",
    "load_graph",
    "save_graph",
    "synth_graph",
    "temporal_split",
    "SparseAdj",
    "Tape",
    "Tensor",
    "backward",
    "parameter",
    "GraphContext",
    "Model",
    "ModelConfig",
    "build_model",
    "kaiming_uniform",
    "load_checkpoint",
    "save_checkpoint",
    "xavier_uniform",
    "TrainConfig",
    "TrainResult",
    "TrainingSession",
    "adam_step",
    "class_weights",
    "train",
    "weighted_ce_loss",
    "EvalReport",
    "ScoredSet",
    "auc_roc",
    "auprc",
    "bootstrap_eval",
    "evaluate",
    "percentile_thresholds",
    "AblationGrid",
    "SearchSpace",
    "random_search",
    "run_ablation",
    "successive_halving",
]
