"""Command-line entry point wiring ingestion, training, evaluation, ablation,
and hyperparameter search into reproducible runs.

Every run directory receives a manifest (written before any training starts)
holding the resolved configuration, seed, input digests, and artifact paths,
so the run can be re-executed bit-identically. Report-producing commands also
render figures next to their CSV/JSON outputs unless --no-figures is given.

Exit codes: 0 success, 2 usage errors, 3 data errors, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import figures
from .errors import AmlgnnError
from .graph import (
    TransactionGraph,
    graph_stats,
    load_elliptic,
    load_graph,
    save_graph,
    synth_graph,
    temporal_split,
)
from .layers import ModelConfig, TUNED, load_checkpoint, save_checkpoint
from .metrics import dump_scores, evaluate, illicit_scores
from .search import AblationGrid, SearchSpace, random_search, run_ablation, successive_halving, trials_to_csv
from .train import TrainConfig, train

_EXIT_CODES = {"usage": 2, "data": 3, "numeric": 4}


def _emit_error(category: str, kind: str, message: str) -> None:
    print(json.dumps({"category": category, "error": kind, "message": message}), file=sys.stderr)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: dict, artifacts: list[str]) -> Path:
    manifest = {
        "tool": "amlgnn",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "artifacts": sorted(artifacts),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _parse_ints(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise ValueError(f"{what} must be a comma-separated integer list, got {text!r}") from None


def _resolve_split(graph: TransactionGraph, spec: str | None) -> tuple[int, int, int]:
    """Default split: the benchmark 29/10/10 when T = 49, otherwise roughly
    60/20/20 over the observed step range."""
    if spec:
        parts = _parse_ints(spec, "--split-steps")
        if len(parts) != 3:
            raise ValueError("--split-steps needs exactly three counts")
        return parts[0], parts[1], parts[2]
    t_max = graph.max_step
    if t_max == 49:
        return 29, 10, 10
    n_train = max(1, round(0.6 * t_max))
    n_val = max(1, round(0.2 * t_max))
    n_test = t_max - n_train - n_val
    if n_test < 1:
        n_train -= 1 - n_test
        n_test = 1
    return n_train, n_val, n_test


def _model_config(args) -> ModelConfig:
    data = _load_json(args.config) if args.config else {}
    data.setdefault("layer_type", args.arch)
    if getattr(args, "seed", None) is not None:
        data.setdefault("seed", args.seed)
    return ModelConfig.from_dict(data)


def _train_config(args, layer_type: str) -> TrainConfig:
    data = _load_json(args.train_config) if args.train_config else {}
    tuned = TUNED[layer_type]
    data.setdefault("learning_rate", tuned["learning_rate"])
    data.setdefault("epochs", tuned["epochs"])
    if getattr(args, "seed", None) is not None:
        data.setdefault("seed", args.seed)
    return TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_ingest(args) -> int:
    graph = load_elliptic(args.features, args.classes, args.edges)
    graph.validate()
    save_graph(graph, args.out)
    stats = graph_stats(graph)
    print(
        f"ingested {stats.num_nodes} nodes, {stats.num_undirected_edges} undirected edges, "
        f"T={graph.max_step} -> {args.out}"
    )
    return 0


def _cmd_synth(args) -> int:
    graph = synth_graph(
        seed=args.seed,
        n_nodes=args.nodes,
        n_steps=args.steps,
        illicit_frac=args.illicit,
        unknown_frac=args.unknown,
        feat_dim=args.dim,
        homophily=args.homophily,
        avg_degree=args.avg_degree,
    )
    graph.validate()
    save_graph(graph, args.out)
    stats = graph_stats(graph)
    print(
        f"synthesised {stats.num_nodes} nodes, {stats.num_undirected_edges} undirected edges, "
        f"labels {stats.label_counts} -> {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = load_graph(args.graph)
    model_config = _model_config(args)
    model_config.validate()
    train_config = _train_config(args, model_config.layer_type)
    counts = _resolve_split(graph, args.split_steps)
    split = temporal_split(graph, *counts)
    artifacts = ["trainlog.csv", "final.ckpt", "best.ckpt"]
    if not args.no_figures:
        artifacts.append("train_curves.png")
    _write_manifest(
        out_dir,
        "train",
        {
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "split_steps": list(counts),
        },
        train_config.seed,
        {"graph": args.graph},
        artifacts,
    )
    result = train(graph, split, model_config, train_config)
    result.log.to_csv(out_dir / "trainlog.csv")
    save_checkpoint(out_dir / "final.ckpt", result.model, extra_meta={"selection": "final"})
    save_checkpoint(out_dir / "best.ckpt", result.best_model, extra_meta={"selection": "best_val_auprc", "best_epoch": result.best_epoch})
    if not args.no_figures and result.log.rows:
        figures.training_curves(out_dir / "trainlog.csv", out_dir / "train_curves.png")
    best = "n/a" if result.best_val_auprc is None else f"{result.best_val_auprc:.4f}"
    print(f"trained {train_config.epochs} epochs; best val AUPRC {best} -> {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    graph = load_graph(args.graph)
    model, _, meta = load_checkpoint(args.checkpoint)
    counts = _resolve_split(graph, args.split_steps)
    split = temporal_split(graph, *counts)
    mask = split.mask_for(args.split)
    report = evaluate(model, graph, mask, seed=args.seed)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out_path)
    report.to_csv(out_path.with_suffix(".csv"))
    if args.dump_scores:
        from .layers import GraphContext
        from . import autodiff as ad

        scores = illicit_scores(model, GraphContext(graph), ad.Tensor(graph.features))
        dump_scores(args.dump_scores, graph, mask, scores)
    if not args.no_figures:
        figures.threshold_tradeoff(out_path, out_path.parent / f"{out_path.stem}_thresholds.png")
        if args.dump_scores:
            figures.pr_curve(args.dump_scores, out_path.parent / f"{out_path.stem}_pr_curve.png")
    auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
    selection = meta.get("selection", "unknown")
    print(
        f"evaluated {args.split} split with {selection} checkpoint: "
        f"AUPRC {report.auprc:.4f}, AUC {auc} -> {out_path}"
    )
    return 0


def _cmd_ablate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = load_graph(args.graph)
    grid = AblationGrid.from_json(args.grid) if args.grid else AblationGrid()
    seeds = _parse_ints(args.seeds, "--seeds")
    counts = _resolve_split(graph, args.split_steps)
    split = temporal_split(graph, *counts)
    artifacts = ["ablation_table.csv", "ablation_runs.csv"]
    if not args.no_figures:
        artifacts.append("ablation_bars.png")
    _write_manifest(
        out_dir,
        "ablate",
        {"grid": grid.to_dict(), "split_steps": list(counts), "seeds": seeds},
        seeds[0],
        {"graph": args.graph},
        artifacts,
    )
    result = run_ablation(graph, split, grid, seeds)
    result.write_table_csv(out_dir / "ablation_table.csv")
    result.write_runs_csv(out_dir / "ablation_runs.csv")
    if not args.no_figures:
        figures.ablation_bars(out_dir / "ablation_table.csv", out_dir / "ablation_bars.png")
    n_failed = sum(1 for r in result.runs if r.status != "ok")
    print(f"ablation complete: {len(result.runs)} runs, {n_failed} failed -> {out_dir}")
    return 0


def _cmd_hpo(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = load_graph(args.graph)
    space = SearchSpace.from_json(args.space) if args.space else SearchSpace.default(args.arch)
    counts = _resolve_split(graph, args.split_steps)
    split = temporal_split(graph, *counts)
    budgets = _parse_ints(args.budgets, "--budgets")
    artifacts = ["trials.csv", "best_config.json"]
    if not args.no_figures:
        artifacts.append("search_history.png")
    _write_manifest(
        out_dir,
        "hpo",
        {
            "space": space.to_dict(),
            "mode": args.mode,
            "trials": args.trials,
            "split_steps": list(counts),
            "rungs": args.rungs,
            "keep_frac": args.keep_frac,
            "budgets": budgets,
        },
        args.seed,
        {"graph": args.graph},
        artifacts,
    )
    if args.mode == "random":
        trials = random_search(graph, split.train_mask, split.val_mask, space, args.trials, seed=args.seed)
    else:
        trials = successive_halving(
            graph,
            split.train_mask,
            split.val_mask,
            space,
            n_initial=args.trials,
            rungs=args.rungs,
            keep_frac=args.keep_frac,
            budget_schedule=budgets,
            seed=args.seed,
        )
    trials_to_csv(out_dir / "trials.csv", trials)
    best = trials[0]
    with open(out_dir / "best_config.json", "w") as fh:
        json.dump({"params": best.params, "objective_val_auprc": best.objective, "trial_id": best.trial_id},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.no_figures:
        figures.search_history(out_dir / "trials.csv", out_dir / "search_history.png")
    obj = "n/a" if best.objective == float("-inf") else f"{best.objective:.4f}"
    print(f"{args.mode} search finished: best val AUPRC {obj} (trial {best.trial_id}) -> {out_dir}")
    return 0


def _cmd_stats(args) -> int:
    graph = load_graph(args.graph)
    stats = graph_stats(graph)
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
        return 0
    d = stats.to_dict()
    print(f"nodes:             {d['num_nodes']}")
    print(f"undirected edges:  {d['num_undirected_edges']}")
    print(f"labels:            {d['label_counts']}")
    print(f"degree min/mean/max: {d['degree_min']} / {d['degree_mean']:.2f} / {d['degree_max']}")
    print(f"edge homophily:    {d['edge_homophily']}")
    print(f"cross-step edges:  {d['cross_step_edges']}")
    print(f"nodes per step:    {d['nodes_per_step']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amlgnn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"amlgnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a graph cache from Elliptic-format CSVs")
    p.add_argument("--features", required=True, help="headerless features CSV (id, time step, features...)")
    p.add_argument("--classes", required=True, help="classes CSV with header txId,class")
    p.add_argument("--edges", required=True, help="edge list CSV with header txId1,txId2")
    p.add_argument("--out", required=True, help="output graph cache path")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic transaction graph cache")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--nodes", type=int, default=500)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--illicit", type=float, default=0.02, help="illicit label fraction")
    p.add_argument("--unknown", type=float, default=0.77, help="unknown label fraction")
    p.add_argument("--dim", type=int, default=16, help="feature dimension")
    p.add_argument("--homophily", type=float, default=0.8)
    p.add_argument("--avg-degree", type=float, default=4.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one model on a cached graph")
    p.add_argument("--graph", required=True, help="graph cache path")
    p.add_argument("--config", help="model config JSON (defaults: tuned optima for --arch)")
    p.add_argument("--train-config", help="training config JSON")
    p.add_argument("--arch", choices=list(TUNED), default="sage", help="architecture when --config omits layer_type")
    p.add_argument("--seed", type=int, default=None, help="override seed (default 42)")
    p.add_argument("--split-steps", help="train,val,test step counts (default 29,10,10 when T=49)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--split-steps")
    p.add_argument("--seed", type=int, default=42, help="bootstrap subsampling seed")
    p.add_argument("--out", required=True, help="report JSON path (CSV written alongside)")
    p.add_argument("--dump-scores", help="also write node_id,score,label CSV")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="run the architecture x initialisation/normalisation grid")
    p.add_argument("--graph", required=True)
    p.add_argument("--grid", help="grid JSON (default: full 3x3 grid with tuned optima)")
    p.add_argument("--seeds", default="42", help="comma-separated seeds")
    p.add_argument("--split-steps")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("hpo", help="hyperparameter search on train+validation only")
    p.add_argument("--graph", required=True)
    p.add_argument("--space", help="search space JSON (default: tuned space for --arch)")
    p.add_argument("--arch", choices=list(TUNED), default="sage")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--mode", choices=("random", "halving"), default="random")
    p.add_argument("--rungs", type=int, default=3)
    p.add_argument("--keep-frac", type=float, default=0.5)
    p.add_argument("--budgets", default="64,128,256", help="cumulative epoch budget per rung")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--split-steps")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_hpo)

    p = sub.add_parser("stats", help="print summary statistics of a cached graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(args.func(args) or 0)
    except AmlgnnError as exc:
        _emit_error(exc.category, type(exc).__name__, str(exc))
        return _EXIT_CODES.get(exc.category, 1)
    except json.JSONDecodeError as exc:
        _emit_error("data", "JSONDecodeError", str(exc))
        return 3
    except FileNotFoundError as exc:
        _emit_error("usage", "FileNotFoundError", str(exc))
        return 2
    except (ValueError, KeyError) as exc:
        _emit_error("usage", type(exc).__name__, str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
