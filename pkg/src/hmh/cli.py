"""Command-line entry point: train, eval, bench suites, basis inspection,
and dataset generation.

Configs are JSON with a ``format_version`` field; unknown keys are rejected
before any computation.  The environment variable ``HMH_SEED`` overrides the
config seed.  Outputs land in ``<outdir>/`` as checkpoint.json, history.csv,
metrics.json, and meta.json (timestamps live only in meta.json so re-runs are
byte-identical).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as B
from .basis import assemble_basis, hop_energy_profile
from .data import (
    Dataset,
    load_dataset,
    save_dataset,
    stratified_split,
)
from .graph import GraphError
from .hierarchy import build_hierarchy
from .metrics import degree_stratified_accuracy, evaluate_predictions
from .model import load_params, save_params
from .train import (
    DivergenceError,
    TrainConfig,
    history_to_csv,
    predict_node_logits,
    train_graphs,
    train_node,
)

CONFIG_VERSION = 1

CONFIG_KEYS = {
    "format_version": int,
    "task": str,                # node | graph
    "model": str,               # hmh | gcn | smp | cheb
    "dataset": str,             # path to a dataset directory
    "generator": dict,          # alternative to dataset: {"kind": ..., params}
    "outdir": str,
    "seed": int,
    "lr": float,
    "weight_decay": float,
    "epochs": int,
    "patience": int,
    "lambda_div": float,
    "refresh_every": int,
    "deterministic": bool,
    "ratio": float,
    "h_t": int,
    "tau": float,
    "d_hidden": int,
    "enc_hidden": int,
    "encoder_layers": (int, list),
    "dropout": float,
    "similarity_norm": str,
    "metric": str,
    "coarsen_method": str,
    "gcn_layers": int,
    "gcn_hidden": int,
    "cheb_order": int,
    "batch_size": int,
    "threads": int,
}


class ConfigError(ValueError):
    pass


def load_config(path: str) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("format_version") != CONFIG_VERSION:
        raise ConfigError(
            f"config format_version must be {CONFIG_VERSION}, "
            f"got {cfg.get('format_version')!r}"
        )
    for key, value in cfg.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        want = CONFIG_KEYS[key]
        if want is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be a number")
        elif want is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be an integer")
        elif isinstance(want, tuple):
            if not isinstance(value, want):
                raise ConfigError(f"config key {key!r} has the wrong type")
        elif not isinstance(value, want):
            raise ConfigError(f"config key {key!r} has the wrong type")
    if "HMH_SEED" in os.environ:
        cfg["seed"] = int(os.environ["HMH_SEED"])
    return cfg


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg.get("lr", 1e-2),
        weight_decay=cfg.get("weight_decay", 1e-4),
        epochs=cfg.get("epochs", 200),
        patience=cfg.get("patience", 50),
        seed=cfg.get("seed", 0),
        lambda_div=cfg.get("lambda_div", 0.4),
        refresh_every=cfg.get("refresh_every", 25),
        deterministic=cfg.get("deterministic", True),
        ratio=cfg.get("ratio", 0.5),
        threshold=cfg.get("h_t", 4),
        tau=cfg.get("tau", 1.0),
        d_hidden=cfg.get("d_hidden", 64),
        enc_hidden=cfg.get("enc_hidden", 16),
        encoder_layers=cfg.get("encoder_layers", 2),
        dropout=cfg.get("dropout", 0.1),
        similarity_mode=cfg.get("similarity_norm", "softmax"),
        metric=cfg.get("metric", "accuracy"),
        coarsen_method=cfg.get("coarsen_method", "kmeans"),
        gcn_layers=cfg.get("gcn_layers", 2),
        gcn_hidden=cfg.get("gcn_hidden", 32),
        cheb_order=cfg.get("cheb_order", 4),
        batch_size=cfg.get("batch_size", 32),
    )


def _resolve_dataset(cfg: dict) -> Dataset:
    if "dataset" in cfg:
        return load_dataset(cfg["dataset"])
    if "generator" in cfg:
        return _run_generator(dict(cfg["generator"]), cfg.get("seed", 0))
    raise ConfigError("config needs either 'dataset' or 'generator'")


def _run_generator(spec: dict, seed: int):
    kind = spec.pop("kind", None)
    spec.setdefault("seed", seed)
    if kind == "hubspoke":
        return B.gen_hub_spoke(B.HubSpokeConfig(**spec))
    if kind == "sbm":
        sizes = spec.pop("block_sizes", [200, 200])
        return B.gen_sbm(sizes, **spec)
    if kind == "tree":
        return B.gen_tree_neighborsmatch(B.TreeMatchConfig(**spec))
    raise ConfigError(f"unknown generator kind {kind!r}")


def _write_outputs(outdir: Path, result, metrics: dict, cfg: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    save_params(result.params, outdir / "checkpoint.json")
    (outdir / "history.csv").write_text(history_to_csv(result.history))
    with open(outdir / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    with open(outdir / "meta.json", "w") as fh:
        json.dump(
            {"timestamp": time.time(), "config": cfg, "argv": sys.argv},
            fh,
            indent=2,
        )


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        dataset = _resolve_dataset(cfg)
    except (ConfigError, GraphError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    tc = train_config_from(cfg)
    model = cfg.get("model", "hmh")
    task = cfg.get("task", "node")
    outdir = Path(cfg.get("outdir", "out"))
    try:
        if task == "node":
            result = train_node(dataset, tc, model=model)
        elif task == "graph":
            graphs = dataset if isinstance(dataset, list) else None
            if graphs is None:
                raise ConfigError("graph task requires a graph generator")
            labels = np.array([g.label for g in graphs])
            tr, va, te = stratified_split(labels, tc.seed + 1)
            result = train_graphs(
                graphs,
                np.flatnonzero(tr),
                np.flatnonzero(va),
                np.flatnonzero(te),
                tc,
                model=model,
            )
        else:
            raise ConfigError(f"unknown task {task!r}")
    except DivergenceError as exc:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "history.csv").write_text(history_to_csv(exc.history))
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    metrics = {
        "best_val_loss": result.best_val_loss,
        "best_epoch": result.best_epoch,
        "test_metric": result.test_metric,
        "epochs_run": len(result.history),
        "model": model,
        "task": task,
    }
    _write_outputs(outdir, result, metrics, cfg)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config)
        dataset = _resolve_dataset(cfg)
        params = load_params(args.checkpoint)
    except (ConfigError, GraphError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    tc = train_config_from(cfg)
    logits = predict_node_logits(dataset, params, tc)
    metric = evaluate_predictions(
        logits, dataset.labels.labels, dataset.test_mask, tc.metric
    )
    print(json.dumps({"test_metric": metric}))
    return 0


# ---------------------------------------------------------------------------
# bench suites


def cmd_bench(args) -> int:
    from . import suites

    cfg = {}
    if args.config:
        try:
            cfg = load_config(args.config)
        except (ConfigError, OSError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    outdir = Path(cfg.get("outdir", f"bench_{args.suite}"))
    seed = cfg.get("seed", 0)
    runners = {
        "hub": suites.run_hub_suite,
        "depth": suites.run_depth_suite,
        "squash": suites.run_squash_suite,
        "scaling": suites.run_scaling_suite,
        "locality": suites.run_locality_suite,
    }
    if args.suite not in runners:
        print(f"error: unknown suite {args.suite!r}", file=sys.stderr)
        return 1
    summary, csv_text = runners[args.suite](seed=seed, quick=args.quick)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / f"{args.suite}.csv").write_text(csv_text)
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(outdir / "meta.json", "w") as fh:
        json.dump({"timestamp": time.time(), "suite": args.suite}, fh)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_basis_inspect(args) -> int:
    try:
        cfg = load_config(args.config)
        dataset = _resolve_dataset(cfg)
    except (ConfigError, GraphError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    tc = train_config_from(cfg)
    from .model import init_hmh_params
    from .hierarchy import level_size_schedule

    schedule = level_size_schedule(dataset.graph.n, tc.ratio, tc.threshold)
    params = init_hmh_params(
        tc.seed, dataset.features.shape[1], dataset.labels.num_classes,
        n_levels=len(schedule), enc_hidden=tc.enc_hidden,
        encoder_layers=tc.encoder_layers,
    )
    tree = build_hierarchy(
        dataset.graph, dataset.features, params.encoders,
        ratio=tc.ratio, threshold=tc.threshold, tau=tc.tau, seed=tc.seed,
        similarity_mode=tc.similarity_mode, method=tc.coarsen_method,
    )
    bases = assemble_basis(tree)
    outdir = Path(cfg.get("outdir", "basis_inspect"))
    outdir.mkdir(parents=True, exist_ok=True)
    report = []
    hop_rows = ["level,column,kind,hop,fraction"]
    kind_names = {0: "scaling", 1: "inter", 2: "intra"}
    for b in bases:
        entry = {
            "level": b.level,
            "n": b.n,
            "columns_by_kind": b.kind_counts(),
            "gram_residual": b.gram_residual(),
            "nnz": b.nnz,
        }
        report.append(entry)
        g = tree.levels[b.level].graph
        dense = b.dense()
        for c in range(b.n):
            col = dense[:, c]
            if not col.any():
                continue
            prof = hop_energy_profile(g, col)
            for h, frac in enumerate(prof):
                hop_rows.append(
                    f"{b.level},{c},{kind_names[int(b.column_kind[c])]},{h},{frac:.12g}"
                )
        if b.n <= 64:
            entry["dense"] = np.round(dense, 12).tolist()
    with open(outdir / "basis_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    (outdir / "hop_energy.csv").write_text("\n".join(hop_rows) + "\n")
    for entry in report:
        print(
            f"level {entry['level']}: n={entry['n']} "
            f"kinds={entry['columns_by_kind']} "
            f"gram={entry['gram_residual']:.3e} nnz={entry['nnz']}"
        )
    return 0


def cmd_gen(args) -> int:
    spec = json.loads(args.params) if args.params else {}
    spec["kind"] = args.kind
    try:
        data = _run_generator(spec, spec.get("seed", 0))
    except (ConfigError, TypeError, B.BenchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    if isinstance(data, list):
        out.mkdir(parents=True, exist_ok=True)
        for i, gd in enumerate(data):
            sub = out / f"graph_{i:05d}"
            sub.mkdir(parents=True, exist_ok=True)
            from .data import save_edge_list, save_features

            save_edge_list(gd.graph, sub / "edges.tsv")
            save_features(gd.features, sub / "features.csv")
            (sub / "label.json").write_text(
                json.dumps({"label": gd.label, "num_classes": gd.num_classes})
            )
        print(f"wrote {len(data)} graphs to {out}")
    else:
        save_dataset(data, out)
        print(f"wrote dataset to {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hmh",
        description="Hierarchical multi-scale spectral graph learning.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for internal parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("config")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("config")
    p_eval.add_argument("checkpoint")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="run a benchmark suite")
    p_bench.add_argument("suite",
                         help="hub | depth | squash | scaling | locality")
    p_bench.add_argument("--config", default=None)
    p_bench.add_argument("--quick", action="store_true",
                         help="reduced sizes for smoke testing")
    p_bench.set_defaults(func=cmd_bench)

    p_basis = sub.add_parser("basis", help="basis diagnostics")
    basis_sub = p_basis.add_subparsers(dest="basis_command", required=True)
    p_inspect = basis_sub.add_parser("inspect")
    p_inspect.add_argument("config")
    p_inspect.set_defaults(func=cmd_basis_inspect)

    p_gen = sub.add_parser("gen", help="write a synthetic dataset to disk")
    p_gen.add_argument("kind", help="hubspoke | tree | sbm")
    p_gen.add_argument("out")
    p_gen.add_argument("--params", default=None,
                       help="JSON object of generator parameters")
    p_gen.set_defaults(func=cmd_gen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
