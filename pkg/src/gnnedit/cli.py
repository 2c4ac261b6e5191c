"""Command-line entry point.

Every subcommand reads one JSON config (missing keys fall back to
:data:`DEFAULTS`), applies ``--set a.b=value`` overrides, and writes into the
configured output directory together with a ``config.json`` snapshot of the
fully resolved config. Outputs are never overwritten unless ``--force`` is
given.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .editharness import (EditConfig, EditContext, num_workers, run_batch, run_independent,
                          run_motivation, run_sequential, sweep, write_report, write_rows_csv)
from .graphcore import Graph, GraphFormatError, generate_sbm, load_graph, save_graph, split_stratified
from .models import (KINDS, Architecture, Model, TrainingDivergedError, accuracy, init_model,
                     load_checkpoint, save_checkpoint, stitch_egnn, train_base)
from .rewire import MAX_ANCHORS, QPSolverError, capture_anchors, load_anchors, save_anchors

log = logging.getLogger("gnnedit")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS = {
    "dataset": {
        "path": None,
        "sbm": {"num_blocks": 4, "nodes_per_block": 100, "p_in": 0.05, "p_out": 0.01,
                "feature_dim": 32, "feature_noise": 0.5, "mean_scale": 1 / 6,
                "label_noise": 0.05, "seed": 1},
        "split": {"train_per_class": 20, "valid_per_class": 30, "seed": 0},
    },
    "model": {"kind": "gcn", "num_layers": 2, "hidden_dim": 32, "dropout": 0.1},
    "training": {"epochs": 200, "lr": 0.01, "seed": 0, "optimizer": "adam"},
    "editing": {"editor": "GRE+", "lambda": 0.0, "K": 3, "alpha": 0.01, "max_steps": 100,
                "tolerance": 1e-8, "protocol": "independent", "num_edits": 50, "seed": 0,
                "batch_size": 10, "num_rounds": 1, "anchor_seed": 0, "refresh_anchors": False},
    "motivation": {"kinds": ["mlp", "gcn", "sage"], "steps": 20, "num_targets": 50},
    "sweep": {"editors": ["GD", "GRE", "GRE+"], "lambda_grid": [0.0, 0.1, 1.0, 10.0, 50.0],
              "K_grid": [1, 2, 3, 5]},
    "output": "runs/default",
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --- config --------------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {path!r}")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(val, dict):
                raise ConfigError(f"config field {path!r} must be an object")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form a.b=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def resolve_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then dotted overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    for item in overrides:
        keys, value = _parse_override(item)
        nested: dict = value
        for k in reversed(keys):
            nested = {k: nested}
        cfg = _merge(cfg, nested)
    validate_config(cfg)
    return cfg


def _check(cond: bool, field: str, msg: str):
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def validate_config(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["path"] is not None:
        _check(Path(ds["path"]).is_dir(), "dataset.path", f"directory {ds['path']!r} does not exist")
    sbm = ds["sbm"]
    _check(sbm["num_blocks"] >= 1 and sbm["nodes_per_block"] >= 1, "dataset.sbm", "sizes must be >= 1")
    for p in ("p_in", "p_out"):
        _check(0.0 <= sbm[p] <= 1.0, f"dataset.sbm.{p}", "must lie in [0, 1]")
    m = cfg["model"]
    _check(m["kind"] in KINDS, "model.kind", f"must be one of {KINDS}")
    _check(m["num_layers"] >= 1, "model.num_layers", "must be >= 1")
    _check(m["hidden_dim"] >= 1, "model.hidden_dim", "must be >= 1")
    _check(0.0 <= m["dropout"] < 1.0, "model.dropout", "must lie in [0, 1)")
    t = cfg["training"]
    _check(t["epochs"] >= 0, "training.epochs", "must be >= 0")
    _check(t["lr"] > 0, "training.lr", "must be positive")
    _check(t["optimizer"] in ("adam", "gd"), "training.optimizer", "must be 'adam' or 'gd'")
    e = cfg["editing"]
    _check(e["editor"] in ("GD", "GRE", "GRE+"), "editing.editor", "must be GD, GRE or GRE+")
    _check(e["lambda"] >= 0, "editing.lambda", "must be >= 0")
    _check(1 <= e["K"] <= MAX_ANCHORS, "editing.K", f"must lie in [1, {MAX_ANCHORS}]")
    _check(e["alpha"] >= 0, "editing.alpha", "must be >= 0")
    _check(e["max_steps"] >= 1, "editing.max_steps", "must be >= 1")
    _check(e["protocol"] in ("independent", "sequential", "batch"), "editing.protocol",
           "must be independent, sequential or batch")
    _check(e["num_edits"] >= 1, "editing.num_edits", "must be >= 1")
    _check(e["batch_size"] >= 1 and e["num_rounds"] >= 1, "editing.batch_size", "must be >= 1")
    for k in cfg["motivation"]["kinds"]:
        _check(k in KINDS, "motivation.kinds", f"unknown kind {k!r}")
    _check(all(lam >= 0 for lam in cfg["sweep"]["lambda_grid"]), "sweep.lambda_grid", "must be >= 0")
    _check(all(1 <= k <= MAX_ANCHORS for k in cfg["sweep"]["K_grid"]), "sweep.K_grid",
           f"entries must lie in [1, {MAX_ANCHORS}]")


def edit_config(cfg: dict) -> EditConfig:
    e = cfg["editing"]
    return EditConfig(e["editor"], float(e["lambda"]), int(e["K"]), float(e["alpha"]),
                      int(e["max_steps"]), float(e["tolerance"]), int(e["anchor_seed"]),
                      bool(e["refresh_anchors"]))


# --- pipeline pieces -------------------------------------------------------------

def load_dataset(cfg: dict) -> tuple[Graph, object]:
    ds = cfg["dataset"]
    sp = ds["split"]
    if ds["path"] is not None:
        try:
            graph, split = load_graph(ds["path"])
        except (GraphFormatError, FileNotFoundError) as e:
            raise DataError(str(e)) from None
    else:
        graph, split = generate_sbm(**ds["sbm"]), None
    if split is None:
        split = split_stratified(graph.labels, sp["train_per_class"], sp["valid_per_class"],
                                 seed=sp["seed"], num_classes=graph.num_classes)
    return graph, split


def build_model(cfg: dict, ctx: EditContext, kind: str | None = None) -> tuple[Model, list]:
    """Train a base model per the config; EGNN kinds train their base GNN and
    stitch an untrained peer MLP onto it."""
    m, t = cfg["model"], cfg["training"]
    kind = kind or m["kind"]
    arch = Architecture(kind, ctx.graph.feature_dim, ctx.graph.num_classes,
                        m["num_layers"], m["hidden_dim"], m["dropout"])
    base_arch = Architecture(arch.base_kind, arch.in_dim, arch.out_dim, arch.num_layers,
                             arch.hidden_dim, arch.dropout) if arch.is_egnn else arch
    model = init_model(base_arch, t["seed"])
    model, curve = train_base(model, ctx.train_graph, ctx.train_adj, t["epochs"], t["lr"],
                              optimizer=t["optimizer"])
    if arch.is_egnn:
        model = stitch_egnn(model)
    return model, curve


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output: directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: dict, out: Path, command: str):
    (out / "config.json").write_text(json.dumps(dict(cfg, command=command), indent=2, sort_keys=True) + "\n")


def _write_split(split, out: Path):
    (out / "splits.json").write_text(json.dumps(split.to_json(), sort_keys=True) + "\n")


def _model_for_edit(cfg, args, ctx):
    if args.checkpoint:
        try:
            return load_checkpoint(args.checkpoint)
        except (FileNotFoundError, ValueError) as e:
            raise DataError(f"checkpoint: {e}") from None
    return build_model(cfg, ctx)[0]


# --- commands ------------------------------------------------------------------

def cmd_gen_sbm(cfg, args, out):
    graph, split = load_dataset(cfg)
    save_graph(graph, out / "data", split)
    _write_split(split, out)


def cmd_train(cfg, args, out):
    graph, split = load_dataset(cfg)
    ctx = EditContext.build(graph, split)
    model, curve = build_model(cfg, ctx)
    save_checkpoint(model, out / "model")
    _write_split(split, out)
    train_acc = accuracy(model, ctx.train_graph, ctx.train_adj, np.arange(ctx.train_graph.num_nodes))
    rows = [{"epoch": i, "loss": v, "train_acc": ""} for i, v in enumerate(curve)]
    rows.append({"epoch": len(curve), "loss": ctx.train_loss(model), "train_acc": train_acc})
    write_rows_csv(rows, out / "train_curve.csv", ("epoch", "loss", "train_acc"))
    log.info("trained %s: training accuracy %.4f, test accuracy %.4f",
             model.arch.kind, train_acc, ctx.test_accuracy(model))


def cmd_capture_anchors(cfg, args, out):
    graph, split = load_dataset(cfg)
    ctx = EditContext.build(graph, split)
    model = _model_for_edit(cfg, args, ctx)
    e = cfg["editing"]
    K = 1 if e["editor"] == "GRE" else e["K"]
    save_anchors(capture_anchors(model, ctx.train_graph, ctx.train_adj, K, e["anchor_seed"]),
                 out / "anchors")


def cmd_edit(cfg, args, out):
    graph, split = load_dataset(cfg)
    ctx = EditContext.build(graph, split)
    model = _model_for_edit(cfg, args, ctx)
    config = edit_config(cfg)
    anchors = None
    if args.anchors and config.editor != "GD":
        try:
            anchors = load_anchors(args.anchors, model.fingerprint())
        except (FileNotFoundError, ValueError) as e:
            raise DataError(f"anchors: {e}") from None
    e = cfg["editing"]
    if e["protocol"] == "independent":
        report = run_independent(model, ctx, config, e["num_edits"], e["seed"], anchors, num_workers())
    elif e["protocol"] == "sequential":
        _, report = run_sequential(model, ctx, config, e["num_edits"], e["seed"], anchors)
    else:
        report = run_batch(model, ctx, config, e["batch_size"], e["num_rounds"], e["seed"], anchors)
    report.config["arch"] = model.arch.kind
    write_report(report, out)
    agg = report.aggregates()
    log.info("%s %s: %d edits, SR %s, DD mean %s", config.editor, e["protocol"], agg["num_edits"],
             agg["SR"], agg["dd_mean"])


def cmd_motivation(cfg, args, out):
    graph, split = load_dataset(cfg)
    ctx = EditContext.build(graph, split)
    models = {kind: build_model(cfg, ctx, kind)[0] for kind in cfg["motivation"]["kinds"]}
    mot = cfg["motivation"]
    rows = run_motivation(models, ctx, mot["steps"], mot["num_targets"], cfg["editing"]["alpha"],
                          cfg["editing"]["seed"])
    write_rows_csv(rows, out / "curves.csv", ("step", "metric", "value", "arch"))


def cmd_sweep(cfg, args, out):
    graph, split = load_dataset(cfg)
    ctx = EditContext.build(graph, split)
    model = _model_for_edit(cfg, args, ctx)
    sw, e = cfg["sweep"], cfg["editing"]
    rows = sweep(model, ctx, edit_config(cfg), tuple(sw["editors"]), tuple(sw["lambda_grid"]),
                 tuple(sw["K_grid"]), e["num_edits"], e["seed"], num_workers())
    write_rows_csv(rows, out / "pareto.csv",
                   ("editor", "lambda", "K", "SR", "DD_mean", "DD_std", "acc_mean"))


COMMANDS = {"gen-sbm": cmd_gen_sbm, "train": cmd_train, "capture-anchors": cmd_capture_anchors,
            "edit": cmd_edit, "motivation": cmd_motivation, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnnedit", description="Gradient-rewired editing of GNN node classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config leaf by dotted path, e.g. editing.K=5")
        p.add_argument("--output", help="output directory (overrides the config's 'output')")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("capture-anchors", "edit", "sweep"):
            p.add_argument("--checkpoint", help="model directory from 'train'; trained from the config if omitted")
        if name == "edit":
            p.add_argument("--anchors", help="anchor directory from 'capture-anchors'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.output:
            overrides.append(f"output={json.dumps(args.output)}")
        cfg = resolve_config(args.config, overrides)
        out = _prepare_out(cfg["output"], args.force)
        _snapshot(cfg, out, args.command)
        COMMANDS[args.command](cfg, args, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, QPSolverError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
