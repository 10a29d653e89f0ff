"""Command line: ``censnet {linegraph,train,eval,synth,replicate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Settings come from flags, optionally layered over a JSON config
file (``--config``); flags win. ``CENSNET_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse

from . import __version__
from .data import (
    GENERATORS,
    few_shot_split,
    graph_split,
    link_split,
    load_graph_dataset,
    read_manifest,
    save_graph_dataset,
    save_sparse_matrix,
)
from .estimators import model_from_checkpoint
from .exceptions import (
    ConstructionError,
    ContractError,
    DataFormatError,
    NumericalError,
    ShapeError,
    UnsupportedInputError,
    ValidationError,
)
from .graph import Graph, build_bundle
from .metrics import EvalResult, accuracy, multitask_auc, rmse
from .training import (
    TrainConfig,
    _link_metrics,
    encode_mean,
    graph_predictions,
    load_checkpoint,
    node_logits,
    save_checkpoint,
    train_graph_level,
    train_link_prediction,
    train_node_classification,
)
from .validation import check_fraction, check_graph, check_graphs, check_hidden

logger = logging.getLogger("censnet")

SCHEMA_VERSION = 1
TASKS = ("node-cls", "graph-cls", "graph-reg", "link-pred")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# generator -> task of the dataset it writes
GENERATOR_TASKS = {
    "planted-partition": "node-cls",
    "planted-rule": "graph-cls",
    "planted-pooled": "graph-reg",
    "planted-lowrank": "link-pred",
}

# named sweeps for `replicate`; citation recipes need a converted dataset
RECIPES = {
    "cora-node": dict(task="node-cls", dataset="cora", label_rate=0.03),
    "citeseer-node": dict(task="node-cls", dataset="citeseer", label_rate=0.005),
    "pubmed-node": dict(task="node-cls", dataset="pubmed", label_rate=0.0003),
    "cora-link": dict(task="link-pred", dataset="cora"),
    "planted-node": dict(task="node-cls", generator="planted-partition", label_rate=0.1),
    "planted-rule": dict(task="graph-cls", generator="planted-rule", train_frac=0.7),
    "planted-link": dict(task="link-pred", generator="planted-lowrank"),
}


class ConfigError(ValidationError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce one run."""

    task: str
    dataset: str
    seed: int = 0
    label_rate: float = 0.03
    train_frac: float = 0.8
    out: str | None = None
    train: dict = field(default_factory=dict)

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"--task must be one of {', '.join(TASKS)}, got {self.task!r}")
        if not self.dataset:
            raise ConfigError("--dataset is required")
        check_fraction(self.label_rate, "label_rate", high_open=False)
        check_fraction(self.train_frac, "train_frac")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        TrainConfig.from_dict(self.train)
        return self

    @property
    def train_config(self):
        return TrainConfig.from_dict(self.train)

    def to_dict(self):
        return asdict(self)


# -- dataset resolution ------------------------------------------------------------

def resolve_dataset(name):
    """A directory path, or a bare name looked up under ``$CENSNET_DATA_DIR``."""
    p = Path(name)
    if (p / "manifest.json").exists():
        return p
    root = os.environ.get("CENSNET_DATA_DIR")
    if root and (Path(root) / name / "manifest.json").exists():
        return Path(root) / name
    hint = "" if root else " (set CENSNET_DATA_DIR to look datasets up by name)"
    raise DataFormatError(f"dataset {name!r} not found{hint}", path=p)


def _load_for_task(path, task):
    manifest = read_manifest(path)
    data = load_graph_dataset(path)
    graph_level = task in ("graph-cls", "graph-reg")
    if graph_level != manifest.graph_level:
        raise ConfigError(f"dataset {manifest.name!r} is a {manifest.task} dataset; cannot run {task}")
    if graph_level:
        return manifest, check_graphs(data)
    return manifest, check_graph(data, require_labels=task == "node-cls")


# -- core run / eval -----------------------------------------------------------------

def _split_for(run: RunConfig, data):
    if run.task == "node-cls":
        return few_shot_split(data, run.label_rate, run.seed)
    if run.task == "link-pred":
        return link_split(data, run.seed)
    return graph_split(len(data), run.train_frac, run.seed)


def _model_record(model):
    from .estimators import _model_record as censnet_record, _vae_record
    from .layers import VAEParams

    return _vae_record(model) if isinstance(model, VAEParams) else censnet_record(model)


def execute_run(run: RunConfig, data=None, manifest=None):
    """Train once; returns ``(report_dict, model, split)``. ``data`` skips loading."""
    run.validate()
    if data is None:
        manifest, data = _load_for_task(resolve_dataset(run.dataset), run.task)
    cfg = run.train_config
    split = _split_for(run, data)
    if run.task == "node-cls":
        report, model = train_node_classification(data, split, cfg)
    elif run.task == "link-pred":
        report, model, _, split = train_link_prediction(data, cfg, split)
    else:
        report, model = train_graph_level(data, split, cfg, task=run.task)
    out = report.to_dict(timing=False)
    out["run_config"] = run.to_dict()
    out["schema_version"] = SCHEMA_VERSION
    out["version"] = __version__
    if manifest is not None:
        out["dataset_checksum"] = manifest.checksum
    return out, model, split, report


def evaluate(run: RunConfig, model, data):
    """Per-split :class:`EvalResult` list for a trained model."""
    split = _split_for(run, data)
    results = []
    if run.task == "node-cls":
        pred = node_logits(model, data, build_bundle(data)).argmax(axis=1)
        for name, m in split.as_dict().items():
            m = m & (data.labels >= 0)
            if m.any():
                results.append(EvalResult("accuracy", accuracy(pred, data.labels, m), int(m.sum()), name))
    elif run.task == "link-pred":
        mu = encode_mean(model, split.train_graph, run.train_config.gate_self_loop)
        for name in ("val", "test"):
            n = len(getattr(split, f"{name}_pos"))
            if n:
                auc, ap = _link_metrics(mu, split, name)
                results.append(EvalResult("auc", auc, 2 * n, name))
                results.append(EvalResult("ap", ap, 2 * n, name))
    else:
        T = np.vstack([g.targets for g in data])
        M = np.vstack([g.target_mask for g in data])
        for name, idx in zip(("train", "val", "test"), split):
            if len(idx) == 0:
                continue
            pred = graph_predictions(model, [data[i] for i in idx])
            try:
                if run.task == "graph-cls":
                    results.append(EvalResult("auc", multitask_auc(pred, T[idx], M[idx]), len(idx), name))
                else:
                    results.append(EvalResult("rmse", rmse(pred, T[idx], M[idx]), len(idx), name))
            except ContractError:
                logger.warning("no metric on %s: a task lacks both classes", name)
    return results


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run(out_dir, report_dict, report, model, run: RunConfig):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = model.get_weights()
    names = [p.name for p in model.parameters()]
    save_checkpoint(out_dir / "checkpoint.json", weights, names, run.train_config,
                    {"model": _model_record(model), "run_config": run.to_dict(), "schema_version": SCHEMA_VERSION})
    _write_json(out_dir / "report.json", report_dict)
    (out_dir / "loss_curve.csv").write_text(report.curve_csv(), encoding="utf-8")


# -- argument handling ------------------------------------------------------------------

def _on_off(text):
    t = str(text).lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _add_run_flags(p, dataset_required=True):
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--dataset", help="dataset directory or name under $CENSNET_DATA_DIR")
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--label-rate", type=float, help="node-cls: fraction of nodes with visible labels")
    p.add_argument("--train-frac", type=float, help="graph tasks: fraction of graphs for training")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", help="comma-separated widths, e.g. 32,32")
    p.add_argument("--dropout", type=float)
    p.add_argument("--gate-self-loop", type=_on_off, metavar="{on,off}")
    p.add_argument("--batch-count", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--latent", type=int)
    p.add_argument("--out", help="output directory")


RUN_KEYS = ("task", "dataset", "seed", "label_rate", "train_frac", "out")
TRAIN_KEYS = ("epochs", "lr", "hidden", "dropout", "gate_self_loop", "batch_count", "patience", "latent")


def _read_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in raw.items()}


def build_run_config(args, base=None) -> RunConfig:
    """Merge recipe/base settings, the config file and flags (in rising priority)."""
    merged = dict(base or {})
    merged.update(_read_config_file(getattr(args, "config", None)))
    for key in RUN_KEYS + TRAIN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    known = set(RUN_KEYS) | set(TRAIN_KEYS) | {"train", "generator", "generator_params"}
    unknown = sorted(set(merged) - known - {f for f in TrainConfig.__dataclass_fields__})
    if unknown:
        raise ConfigError(f"unknown settings: {', '.join(unknown)}")
    task = merged.get("task")
    if task not in TASKS:
        raise ConfigError(f"--task must be one of {', '.join(TASKS)}")
    train = dict(merged.pop("train", {}) or {})
    train.pop("task", None)
    train.pop("seed", None)
    for key in list(merged):
        if key in TrainConfig.__dataclass_fields__ and key not in RUN_KEYS and key != "task":
            train[key] = merged.pop(key)
    if "hidden" in train:
        train["hidden"] = check_hidden(train["hidden"])
    cfg = TrainConfig.defaults_for(task, seed=merged.get("seed", 0), **train)
    run = RunConfig(
        task=task,
        dataset=str(merged.get("dataset") or merged.get("generator") or ""),
        seed=int(merged.get("seed", 0)),
        label_rate=float(merged.get("label_rate", 0.03)),
        train_frac=float(merged.get("train_frac", 0.8)),
        out=merged.get("out"),
        train=cfg.to_dict(),
    )
    return run.validate()


# -- subcommands ---------------------------------------------------------------------------

def cmd_linegraph(args):
    path = resolve_dataset(args.dataset)
    manifest = read_manifest(path)
    data = load_graph_dataset(path)
    if isinstance(data, list):
        if not 0 <= args.graph_index < len(data):
            raise ConfigError(f"--graph-index must be in [0, {len(data)})")
        data = data[args.graph_index]
    g = check_graph(data)
    bundle = build_bundle(g, check=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mats = {
        "incidence.csv": bundle.T,
        "node_adjacency.csv": bundle.A_v,
        "edge_adjacency.csv": bundle.A_e,
        "node_adjacency_normalized.csv": bundle.norm_Av,
        "edge_adjacency_normalized.csv": bundle.norm_Ae,
    }
    for fname, S in mats.items():
        save_sparse_matrix(out / fname, S)
    # the line graph itself as a native dataset: its nodes are the edges of g
    upper = scipy.sparse.triu(bundle.A_e.to_scipy(), k=1).tocoo()
    lg_edges = np.column_stack([upper.row, upper.col]).astype(np.int64)
    lg = Graph.from_edge_list(g.num_edges, lg_edges, g.Z, directions=None, name=f"L({manifest.name})")
    save_graph_dataset(out / "line_graph", lg, name=f"L({manifest.name})", task="link-pred",
                       params={"source": manifest.name, "source_checksum": manifest.checksum})
    _write_json(out / "linegraph.json", {
        "schema_version": SCHEMA_VERSION,
        "source": str(path),
        "source_checksum": manifest.checksum,
        "num_nodes": g.num_nodes,
        "num_edges": g.num_edges,
        "shapes": {k: list(S.shape) for k, S in mats.items()},
        "config": {"dataset": args.dataset, "graph_index": args.graph_index, "out": str(out)},
    })
    print(f"line graph of {manifest.name}: {g.num_edges} nodes, {len(lg_edges)} edges -> {out}")
    return EXIT_OK


def cmd_train(args):
    run = build_run_config(args)
    if not run.out:
        raise ConfigError("--out is required")
    report_dict, model, _, report = execute_run(run)
    write_run(run.out, report_dict, report, model, run)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in report_dict["final"].items())
    print(f"{run.task} on {run.dataset} (seed {run.seed}): {summary} -> {run.out}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.json"
    config, weights, _, extra = load_checkpoint(ckpt)
    if "run_config" not in extra:
        raise DataFormatError("checkpoint has no run configuration", path=ckpt)
    run = RunConfig(**extra["run_config"])
    if args.dataset:
        run.dataset = args.dataset
    run.validate()
    manifest, data = _load_for_task(resolve_dataset(run.dataset), run.task)
    model = model_from_checkpoint(config, weights, extra)
    results = evaluate(run, model, data)
    record = {
        "schema_version": SCHEMA_VERSION,
        "run_config": run.to_dict(),
        "checkpoint": str(ckpt),
        "dataset_checksum": manifest.checksum,
        "results": [r.to_dict() for r in results],
    }
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_params(items):
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            params[k.replace("-", "_")] = json.loads(v)
        except json.JSONDecodeError:
            params[k.replace("-", "_")] = v
    return params


def generate(name, params, seed):
    if name not in GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; choose from {', '.join(GENERATORS)}")
    try:
        data = GENERATORS[name](seed=seed, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None
    return data[0] if name == "planted-lowrank" else data


def cmd_synth(args):
    params = _parse_params(args.param)
    data = generate(args.generator, params, args.seed)
    echo = {"generator": args.generator, "seed": args.seed, **params}
    manifest = save_graph_dataset(args.out, data, name=args.name or args.generator,
                                  task=GENERATOR_TASKS[args.generator], params=echo)
    print(f"{args.generator}: wrote {manifest.num_graphs} graph(s), {manifest.num_nodes} nodes -> {args.out}")
    return EXIT_OK


def _replicate_one(payload):
    run_dict, generator, gen_params, threads = payload
    _limit_threads(threads)
    run = RunConfig(**run_dict)
    data = None
    if generator:
        data = generate(generator, gen_params, run.seed)
        data = check_graphs(data) if isinstance(data, list) else check_graph(data)
    report_dict, model, _, report = execute_run(run, data=data)
    write_run(run.out, report_dict, report, model, run)
    return report_dict["final"]


def aggregate(finals):
    """Mean and population standard deviation of every metric present in all runs."""
    keys = [k for k in finals[0] if all(k in f for f in finals)]
    table = {}
    for k in keys:
        v = np.array([f[k] for f in finals], dtype=np.float64)
        table[k] = {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size), "values": v.tolist()}
    return table


def format_table(recipe, table, percent):
    scale = 100.0 if percent else 1.0
    lines = [f"| Method | Recipe | {' | '.join(table)} |", "|---|---|" + "---|" * len(table)]
    cells = [f"{scale * s['mean']:.1f}±{scale * s['std']:.1f}" if percent else f"{s['mean']:.4f}±{s['std']:.4f}"
             for s in table.values()]
    lines.append(f"| CensNet | {recipe} | {' | '.join(cells)} |")
    return "\n".join(lines) + "\n"


def cmd_replicate(args):
    if args.recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {args.recipe!r}; choose from {', '.join(RECIPES)}")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    recipe = dict(RECIPES[args.recipe])
    generator = recipe.pop("generator", None)
    out = Path(args.out or f"runs/{args.recipe}")
    if generator:
        recipe["dataset"] = generator
    payloads = []
    for i in range(args.seeds):
        seed = args.first_seed + i
        args.seed = seed
        args.out = str(out / f"seed_{seed}")
        run = build_run_config(args, base=recipe)
        if generator:
            run.dataset = generator
        else:
            resolve_dataset(run.dataset)
        # workers stay single-threaded; a serial sweep keeps the caller's limits
        payloads.append((run.to_dict(), generator, {}, 1 if args.workers > 1 else None))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            finals = list(pool.map(_replicate_one, payloads))
    else:
        finals = [_replicate_one(p) for p in payloads]
    table = aggregate(finals)
    percent = RECIPES[args.recipe]["task"] == "node-cls"
    _write_json(out / "summary.json", {
        "schema_version": SCHEMA_VERSION,
        "recipe": args.recipe,
        "seeds": [p[0]["seed"] for p in payloads],
        "run_config": payloads[0][0],
        "metrics": table,
    })
    text = format_table(args.recipe, table, percent)
    (out / "table.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _limit_threads(n):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def build_parser():
    parser = argparse.ArgumentParser(prog="censnet", description="Node/edge co-embedding graph networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("linegraph", help="write T, A_e and the normalized matrices of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph-index", type=int, default=0, help="graph-level datasets: which graph")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_linegraph)

    p = sub.add_parser("train", help="train one model and write checkpoint, report and loss curve")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every split")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json or a run directory")
    p.add_argument("--dataset", help="override the dataset recorded in the checkpoint")
    p.add_argument("--out", help="write the JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a planted synthetic dataset")
    p.add_argument("--generator", required=True, choices=sorted(GENERATORS))
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replicate", help="run a named recipe over several seeds and tabulate mean±std")
    p.add_argument("--recipe", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    _add_run_flags(p)
    p.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    limiter = _limit_threads(os.environ.get("CENSNET_THREADS") or None)
    try:
        return args.func(args)
    except (DataFormatError, ConstructionError, UnsupportedInputError) as exc:
        print(f"censnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValidationError, ContractError, ShapeError) as exc:
        print(f"censnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"censnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
