"""Message-passing layers, GraphNorm, initialisation schemes, model assembly.

Layer conventions: features are row-major (node i = row i), weights map
d_in -> d_out as H @ W, biases are (1, d_out) rows. The model stack is
[GNN layer -> ReLU -> optional GraphNorm -> dropout] x L, then a linear
embedding layer, then a linear classification head emitting raw logits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import SparseAdj, Tensor
from .container import read_container, write_container
from .errors import BadShape, ConfigOutOfRange, ShapeMismatch, UnknownAggregator
from .graph import TransactionGraph
from .rng import RngStream

GRAPHNORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

CHECKPOINT_MAGIC = b"AMLCKPT\x00"
CHECKPOINT_VERSION = 1

LAYER_TYPES = ("gcn", "gat", "sage")
NORMS = ("none", "graphnorm")
INITS = ("default", "xavier", "xavier_head_only")
AGGREGATORS = ("mean", "max")

# per-architecture tuned optima, used as defaults everywhere
TUNED = {
    "gat": {
        "learning_rate": 6.999e-4,
        "hidden_dim": 148,
        "embedding_dim": 89,
        "num_layers": 2,
        "dropout": 0.2522,
        "epochs": 508,
    },
    "gcn": {
        "learning_rate": 8.475e-4,
        "hidden_dim": 211,
        "embedding_dim": 90,
        "num_layers": 2,
        "dropout": 0.2361,
        "epochs": 497,
    },
    "sage": {
        "learning_rate": 5.302e-4,
        "hidden_dim": 140,
        "embedding_dim": 103,
        "num_layers": 2,
        "dropout": 0.1135,
        "epochs": 397,
        "sage_aggregator": "mean",
    },
}


# ---------------------------------------------------------------------------
# initialisation


def _check_shape(shape) -> tuple[int, int]:
    if len(shape) != 2 or min(shape) < 1:
        raise BadShape(f"initialisers need a 2-D shape, got {shape}")
    return int(shape[0]), int(shape[1])


def xavier_uniform(shape, rng: RngStream, gain: float = 1.0) -> np.ndarray:
    """Uniform on (-a, a) with a = gain * sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = _check_shape(shape)
    if gain < 0:
        raise ValueError("gain must be non-negative")
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.generator().uniform(-bound, bound, size=shape)


def kaiming_uniform(shape, rng: RngStream) -> np.ndarray:
    """Uniform on (-a, a) with a = sqrt(6 / fan_in)."""
    fan_in, _ = _check_shape(shape)
    bound = np.sqrt(6.0 / fan_in)
    return rng.generator().uniform(-bound, bound, size=shape)


def _sage_default(shape, rng: RngStream) -> np.ndarray:
    fan_in, _ = _check_shape(shape)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.generator().uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# precomputed per-graph aggregation structure


class GraphContext:
    """Adjacency views shared by all layers: raw CSR, self-loop CSR, and the
    degree-normalised coefficients each layer kind needs. Built once per
    graph; immutable afterwards."""

    def __init__(self, graph: TransactionGraph):
        self.num_nodes = graph.num_nodes
        self.offsets = graph.csr_offsets
        self.indices = graph.csr_neighbors
        self._degrees = graph.degrees()
        self._cache: dict[str, SparseAdj] = {}
        self._loops: tuple[np.ndarray, np.ndarray] | None = None

    def _with_self_loops(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR structure with a self slot inserted in each sorted neighbor list."""
        if self._loops is None:
            n = self.num_nodes
            rows = np.repeat(np.arange(n, dtype=np.int64), self._degrees)
            before_self = self.indices < rows
            counts = np.zeros(n, dtype=np.int64)
            np.add.at(counts, rows, before_self.astype(np.int64))
            positions = self.offsets[:-1] + counts
            indices = np.insert(self.indices, positions, np.arange(n, dtype=np.int64))
            offsets = self.offsets + np.arange(n + 1, dtype=np.int64)
            self._loops = (offsets, indices)
        return self._loops

    @property
    def raw_adj(self) -> SparseAdj:
        if "raw" not in self._cache:
            self._cache["raw"] = SparseAdj(self.offsets, self.indices, self.num_nodes)
        return self._cache["raw"]

    @property
    def mean_adj(self) -> SparseAdj:
        """Row-normalised neighbors: coefficients 1/deg(i), empty rows stay zero."""
        if "mean" not in self._cache:
            safe = np.maximum(self._degrees, 1)
            coeffs = np.repeat(1.0 / safe, self._degrees)
            self._cache["mean"] = SparseAdj(self.offsets, self.indices, self.num_nodes, coeffs)
        return self._cache["mean"]

    @property
    def gcn_adj(self) -> SparseAdj:
        """Self-loop structure with c_ij = 1 / sqrt((deg(i)+1)(deg(j)+1))."""
        if "gcn" not in self._cache:
            offsets, indices = self._with_self_loops()
            inv_sqrt = 1.0 / np.sqrt(self._degrees + 1.0)
            rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(offsets))
            coeffs = inv_sqrt[rows] * inv_sqrt[indices]
            self._cache["gcn"] = SparseAdj(offsets, indices, self.num_nodes, coeffs)
        return self._cache["gcn"]

    @property
    def loop_adj(self) -> SparseAdj:
        """Self-loop structure without coefficients (attention fills them in)."""
        if "loop" not in self._cache:
            offsets, indices = self._with_self_loops()
            self._cache["loop"] = SparseAdj(offsets, indices, self.num_nodes)
        return self._cache["loop"]


# ---------------------------------------------------------------------------
# layers


class GcnLayer:
    """Degree-normalised convolution with a virtual self-loop."""

    kind = "gcn"

    def __init__(self, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.weight = ad.parameter(np.zeros((d_in, d_out)))
        self.bias = ad.parameter(np.zeros((1, d_out)))

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def reset_default(self, rng: RngStream) -> None:
        self.weight.data[...] = xavier_uniform((self.d_in, self.d_out), rng.child("weight"))
        self.bias.data[...] = 0.0

    def init_xavier(self, rng: RngStream) -> None:
        self.reset_default(rng)

    def forward(self, ctx: GraphContext, h: Tensor) -> Tensor:
        return ad.add(ad.spmm(ctx.gcn_adj, ad.matmul(h, self.weight)), self.bias)


class GatLayer:
    """Attention over each node's neighborhood plus itself.

    Multi-head outputs are concatenated on hidden layers and averaged when
    the layer is the last message-passing layer.
    """

    kind = "gat"

    def __init__(self, d_in: int, d_out: int, heads: int = 1, average_heads: bool = False):
        if heads < 1:
            raise BadShape("gat needs at least one head")
        self.d_in, self.d_out, self.heads = d_in, d_out, heads
        self.average_heads = average_heads
        self.weights = [ad.parameter(np.zeros((d_in, d_out))) for _ in range(heads)]
        self.att_src = [ad.parameter(np.zeros((d_out, 1))) for _ in range(heads)]
        self.att_dst = [ad.parameter(np.zeros((d_out, 1))) for _ in range(heads)]
        width = d_out if average_heads else d_out * heads
        self.bias = ad.parameter(np.zeros((1, width)))

    @property
    def out_width(self) -> int:
        return self.d_out if self.average_heads else self.d_out * self.heads

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k in range(self.heads):
            out[f"h{k}.weight"] = self.weights[k]
            out[f"h{k}.att_src"] = self.att_src[k]
            out[f"h{k}.att_dst"] = self.att_dst[k]
        out["bias"] = self.bias
        return out

    def reset_default(self, rng: RngStream) -> None:
        for k in range(self.heads):
            self.weights[k].data[...] = xavier_uniform(
                (self.d_in, self.d_out), rng.child(f"h{k}", "weight")
            )
            self.att_src[k].data[...] = xavier_uniform((self.d_out, 1), rng.child(f"h{k}", "att_src"))
            self.att_dst[k].data[...] = xavier_uniform((self.d_out, 1), rng.child(f"h{k}", "att_dst"))
        self.bias.data[...] = 0.0

    def init_xavier(self, rng: RngStream) -> None:
        self.reset_default(rng)

    def forward(self, ctx: GraphContext, h: Tensor) -> Tensor:
        adj = ctx.loop_adj
        head_outputs = []
        for k in range(self.heads):
            z = ad.matmul(h, self.weights[k])
            s_src = ad.flatten(ad.matmul(z, self.att_src[k]))
            s_dst = ad.flatten(ad.matmul(z, self.att_dst[k]))
            logits = ad.leaky_relu(
                ad.add(ad.row_select(s_src, adj.rows), ad.row_select(s_dst, adj.indices)),
                LEAKY_SLOPE,
            )
            alpha = ad.segment_softmax(logits, adj.offsets)
            head_outputs.append(ad.spmm(adj.with_coeffs(alpha), z))
        if self.heads == 1:
            combined = head_outputs[0]
        elif self.average_heads:
            combined = head_outputs[0]
            for out in head_outputs[1:]:
                combined = ad.add(combined, out)
            combined = ad.scale(combined, 1.0 / self.heads)
        else:
            combined = ad.concat_cols(*head_outputs)
        return ad.add(combined, self.bias)


class SageLayer:
    """Self transform plus aggregated neighbor transform (mean or max)."""

    kind = "sage"

    def __init__(self, d_in: int, d_out: int, aggregator: str = "mean"):
        if aggregator not in AGGREGATORS:
            raise UnknownAggregator(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")
        self.d_in, self.d_out, self.aggregator = d_in, d_out, aggregator
        self.w_self = ad.parameter(np.zeros((d_in, d_out)))
        self.w_neigh = ad.parameter(np.zeros((d_in, d_out)))
        self.bias = ad.parameter(np.zeros((1, d_out)))

    def params(self) -> dict[str, Tensor]:
        return {"w_self": self.w_self, "w_neigh": self.w_neigh, "bias": self.bias}

    def reset_default(self, rng: RngStream) -> None:
        self.w_self.data[...] = _sage_default((self.d_in, self.d_out), rng.child("w_self"))
        self.w_neigh.data[...] = _sage_default((self.d_in, self.d_out), rng.child("w_neigh"))
        self.bias.data[...] = 0.0

    def init_xavier(self, rng: RngStream) -> None:
        self.w_self.data[...] = xavier_uniform((self.d_in, self.d_out), rng.child("w_self"))
        self.w_neigh.data[...] = xavier_uniform((self.d_in, self.d_out), rng.child("w_neigh"))
        self.bias.data[...] = 0.0

    def forward(self, ctx: GraphContext, h: Tensor) -> Tensor:
        if self.aggregator == "mean":
            agg = ad.spmm(ctx.mean_adj, h)
        else:
            agg = ad.neighbor_max(ctx.raw_adj, h)
        return ad.add(
            ad.add(ad.matmul(h, self.w_self), ad.matmul(agg, self.w_neigh)), self.bias
        )


class GraphNorm:
    """Whole-graph feature normalisation with a learnable mean scale.

    Per column k: out = gamma * (h - alpha * mean(h)) / sqrt(var + eps) + beta,
    where var is the variance of the alpha-centered column.
    """

    kind = "graphnorm"

    def __init__(self, dim: int):
        self.dim = dim
        self.gamma = ad.parameter(np.ones((1, dim)))
        self.beta = ad.parameter(np.zeros((1, dim)))
        self.alpha = ad.parameter(np.ones((1, dim)))

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta, "alpha": self.alpha}

    def reset_default(self, rng: RngStream = None) -> None:
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.alpha.data[...] = 1.0

    init_xavier = reset_default

    def forward(self, h: Tensor) -> Tensor:
        mu = ad.reduce_mean(h)
        centered = ad.sub(h, ad.mul(self.alpha, mu))
        var = ad.reduce_mean(ad.mul(centered, centered))
        sigma = ad.sqrt(ad.add(var, GRAPHNORM_EPS))
        return ad.add(ad.mul(self.gamma, ad.div(centered, sigma)), self.beta)


class LinearLayer:
    kind = "linear"

    def __init__(self, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.weight = ad.parameter(np.zeros((d_in, d_out)))
        self.bias = ad.parameter(np.zeros((1, d_out)))

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def reset_default(self, rng: RngStream) -> None:
        self.weight.data[...] = kaiming_uniform((self.d_in, self.d_out), rng.child("weight"))
        self.bias.data[...] = 0.0

    def init_xavier(self, rng: RngStream) -> None:
        self.weight.data[...] = xavier_uniform((self.d_in, self.d_out), rng.child("weight"))
        self.bias.data[...] = 0.0

    def forward(self, h: Tensor) -> Tensor:
        return ad.add(ad.matmul(h, self.weight), self.bias)


def reset_default(layer, rng: RngStream) -> None:
    """Apply the layer kind's conventional parameter reset."""
    layer.reset_default(rng)


# ---------------------------------------------------------------------------
# configuration and model assembly


@dataclass
class ModelConfig:
    """Architecture description; unset fields default to the tuned optimum
    for the chosen layer type."""

    layer_type: str
    num_layers: int | None = None
    hidden_dim: int | None = None
    embedding_dim: int | None = None
    dropout: float | None = None
    norm: str = "none"
    init: str = "xavier_head_only"
    sage_aggregator: str = "mean"
    gat_heads: int = 1
    out_dim: int = 2
    seed: int = 42

    def __post_init__(self):
        tuned = TUNED.get(self.layer_type, {})
        for name in ("num_layers", "hidden_dim", "embedding_dim", "dropout"):
            if getattr(self, name) is None:
                setattr(self, name, tuned.get(name))

    def validate(self) -> None:
        problems = []
        if self.layer_type not in LAYER_TYPES:
            problems.append(f"layer_type must be one of {LAYER_TYPES}")
        if self.num_layers not in (1, 2, 3):
            problems.append("num_layers must be 1, 2 or 3")
        if self.hidden_dim is None or not 128 <= self.hidden_dim <= 256:
            problems.append("hidden_dim must be in [128, 256]")
        if self.embedding_dim is None or not 64 <= self.embedding_dim <= 128:
            problems.append("embedding_dim must be in [64, 128]")
        if self.dropout is None or not 0.08 <= self.dropout <= 0.64:
            problems.append("dropout must be in [0.08, 0.64]")
        if self.norm not in NORMS:
            problems.append(f"norm must be one of {NORMS}")
        if self.init not in INITS:
            problems.append(f"init must be one of {INITS}")
        if self.sage_aggregator not in AGGREGATORS:
            problems.append(f"sage_aggregator must be one of {AGGREGATORS}")
        if self.gat_heads < 1:
            problems.append("gat_heads must be >= 1")
        if self.out_dim != 2:
            problems.append("out_dim is fixed at 2")
        if problems:
            raise ConfigOutOfRange("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class Model:
    """Parameterised layer stack; safe for concurrent inference once frozen."""

    def __init__(
        self,
        gnn_layers: list,
        norms: list[GraphNorm | None],
        embed: LinearLayer,
        head: LinearLayer,
        dropout_p: float,
        config: ModelConfig | None = None,
    ):
        self.gnn_layers = gnn_layers
        self.norms = norms
        self.embed = embed
        self.head = head
        self.dropout_p = dropout_p
        self.config = config

    def forward(
        self,
        ctx: GraphContext,
        x: Tensor,
        training: bool = False,
        rng: RngStream | None = None,
    ) -> Tensor:
        if training and self.dropout_p > 0 and rng is None:
            raise ValueError("training forward with dropout needs an rng stream")
        h = x
        for i, layer in enumerate(self.gnn_layers):
            h = layer.forward(ctx, h)
            h = ad.relu(h)
            norm = self.norms[i]
            if norm is not None:
                h = norm.forward(h)
            if training and self.dropout_p > 0:
                h = ad.dropout(h, self.dropout_p, rng.child(f"dropout{i}"), training)
        h = self.embed.forward(h)
        return self.head.forward(h)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.gnn_layers):
            out.extend((f"gnn{i}.{k}", t) for k, t in layer.params().items())
            if self.norms[i] is not None:
                out.extend((f"norm{i}.{k}", t) for k, t in self.norms[i].params().items())
        out.extend((f"embed.{k}", t) for k, t in self.embed.params().items())
        out.extend((f"head.{k}", t) for k, t in self.head.params().items())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_params():
            if name not in state:
                raise ShapeMismatch(f"checkpoint is missing parameter {name}")
            if state[name].shape != t.data.shape:
                raise ShapeMismatch(
                    f"parameter {name}: expected shape {t.data.shape}, got {state[name].shape}"
                )
            t.data[...] = state[name]

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    @property
    def input_dim(self) -> int:
        first = self.gnn_layers[0]
        return first.d_in


def build_model(config: ModelConfig, input_dim: int) -> Model:
    """Assemble and initialise the layer stack for a validated config."""
    config.validate()
    hidden, embed_dim = config.hidden_dim, config.embedding_dim
    layers: list = []
    norms: list[GraphNorm | None] = []
    d_in = input_dim
    for i in range(config.num_layers):
        last = i == config.num_layers - 1
        if config.layer_type == "gcn":
            layer = GcnLayer(d_in, hidden)
            width = hidden
        elif config.layer_type == "gat":
            layer = GatLayer(d_in, hidden, heads=config.gat_heads, average_heads=last)
            width = layer.out_width
        else:
            layer = SageLayer(d_in, hidden, aggregator=config.sage_aggregator)
            width = hidden
        layers.append(layer)
        norms.append(GraphNorm(width) if config.norm == "graphnorm" else None)
        d_in = width
    embed = LinearLayer(d_in, embed_dim)
    head = LinearLayer(embed_dim, config.out_dim)
    model = Model(layers, norms, embed, head, config.dropout, config)

    base = RngStream(config.seed, ("init",))
    for i, layer in enumerate(layers):
        stream = base.child(f"gnn{i}")
        if config.init == "xavier":
            layer.init_xavier(stream)
        else:
            layer.reset_default(stream)
        if norms[i] is not None:
            norms[i].reset_default()
    for name, lin in (("embed", embed), ("head", head)):
        stream = base.child(name)
        if config.init == "default":
            lin.reset_default(stream)
        else:
            lin.init_xavier(stream)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    dest: str | Path | BinaryIO,
    model: Model,
    extra: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Versioned binary checkpoint: config + named parameters, bit-exact."""
    if model.config is None:
        raise ValueError("only models built from a ModelConfig can be checkpointed")
    arrays = {f"param:{name}": arr for name, arr in model.state_arrays().items()}
    for name, arr in (extra or {}).items():
        arrays[f"extra:{name}"] = arr
    meta = {"config": model.config.to_dict(), "input_dim": model.input_dim}
    if extra_meta:
        meta.update(extra_meta)
    write_container(dest, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, arrays, meta)


def load_checkpoint(
    src: str | Path | BinaryIO,
) -> tuple[Model, dict[str, np.ndarray], dict]:
    """Rebuild the model from a checkpoint; returns (model, extra arrays, meta)."""
    _, arrays, meta = read_container(src, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config = ModelConfig.from_dict(meta["config"])
    model = build_model(config, int(meta["input_dim"]))
    state = {
        name[len("param:") :]: arr for name, arr in arrays.items() if name.startswith("param:")
    }
    model.load_state(state)
    extra = {
        name[len("extra:") :]: arr for name, arr in arrays.items() if name.startswith("extra:")
    }
    return model, extra, meta
