"""Editing loop, editing protocols, metrics and report files."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import FlatVector, Tape, backward, softmax_cross_entropy
from .graphcore import (Graph, NormalizedAdjacency, SplitAssignment, build_normalized_adjacency,
                        induce_training_subgraph)
from .models import Model, forward, loss_and_grad
from .rewire import AnchorGradientSet, capture_anchors, rewire

log = logging.getLogger(__name__)

EDITORS = ("GD", "GRE", "GRE+")
PROTOCOL_STREAM = 0xED17


@dataclass(frozen=True, eq=False)
class EditContext:
    """Everything an edit is evaluated against: the full graph (edits and
    accuracy) and the training subgraph (training loss and anchors)."""

    graph: Graph
    adj: NormalizedAdjacency
    split: SplitAssignment
    train_graph: Graph
    train_adj: NormalizedAdjacency

    @classmethod
    def build(cls, graph: Graph, split: SplitAssignment) -> "EditContext":
        sub = induce_training_subgraph(graph, split)
        return cls(graph, build_normalized_adjacency(graph), split, sub,
                   build_normalized_adjacency(sub))

    def test_accuracy(self, model: Model, logits=None) -> float:
        if logits is None:
            logits = forward(model, self.graph, self.adj)
        nodes = self.split.test_nodes
        return float(np.mean(np.argmax(logits[nodes], axis=1) == self.graph.labels[nodes]))

    def train_loss(self, model: Model) -> float:
        logits = forward(model, self.train_graph, self.train_adj)
        return softmax_cross_entropy(logits, self.train_graph.labels,
                                     np.arange(self.train_graph.num_nodes))[0]

    def train_gradient(self, model: Model) -> tuple[float, np.ndarray]:
        loss, g = loss_and_grad(model, self.train_graph, self.train_adj,
                                np.arange(self.train_graph.num_nodes))
        return loss, g.data

    def misclassified_valid(self, model: Model) -> np.ndarray:
        nodes = self.split.valid_nodes
        pred = np.argmax(forward(model, self.graph, self.adj)[nodes], axis=1)
        return nodes[pred != self.graph.labels[nodes]]


@dataclass(frozen=True)
class EditConfig:
    editor: str = "GRE+"
    lam: float = 0.0
    K: int = 3
    alpha: float = 0.01
    max_steps: int = 100
    tolerance: float = 1e-8
    anchor_seed: int = 0
    refresh_anchors: bool = False

    def __post_init__(self):
        if self.editor not in EDITORS:
            raise ValueError(f"unknown editor {self.editor!r}; expected one of {EDITORS}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @property
    def anchor_K(self) -> int:
        return 1 if self.editor == "GRE" else self.K


@dataclass(frozen=True)
class EditRequest:
    """One or more target nodes and the labels they should be given."""

    target_node: int | tuple
    desired_label: int | tuple
    max_steps: int = 100
    step_size: float = 0.01

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if len(self.nodes) != len(self.labels):
            raise ValueError("one desired label per target node")

    @property
    def nodes(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.target_node, dtype=np.int64))

    @property
    def labels(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.desired_label, dtype=np.int64))


@dataclass
class EditOutcome:
    targets: list
    success: bool
    steps_used: int
    acc_before: float
    acc_after: float
    train_loss_before: float
    train_loss_after: float
    member_success: list
    target_loss: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    grad_rmse: list = field(default_factory=list)
    diagnostic: str | None = None

    @property
    def dd(self) -> float:
        """Test-accuracy drop in percentage points."""
        return 100.0 * (self.acc_before - self.acc_after)


def grad_rmse(g_a, g_b) -> float:
    """``sqrt(||g_a - g_b||_2^2)``, i.e. the plain Euclidean distance."""
    if isinstance(g_a, FlatVector) and isinstance(g_b, FlatVector) and g_a.layout != g_b.layout:
        raise ValueError("gradient layouts differ")
    a = np.asarray(getattr(g_a, "data", g_a), dtype=np.float64)
    b = np.asarray(getattr(g_b, "data", g_b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def edit_once(model: Model, editor: str, anchors: AnchorGradientSet | None, request: EditRequest,
              ctx: EditContext, lam: float = 0.0, tolerance: float = 1e-8, *,
              record_curves: bool = False, stop_on_success: bool = True) -> tuple[Model, EditOutcome]:
    """Edit ``model`` until every target is predicted as desired.

    Each step checks the prediction first (a correct target costs no step),
    then moves ``theta`` by ``-step_size * g`` where ``g`` is the target-loss
    gradient on editable coordinates, rewired by GRE / GRE+ when asked. The
    input model is left untouched. With ``record_curves`` the training loss
    and its gradient distance to ``g_tg`` are logged at every step, which
    costs an extra pass over the training subgraph.
    """
    if editor not in EDITORS:
        raise ValueError(f"unknown editor {editor!r}")
    if editor != "GD" and anchors is None:
        raise ValueError(f"{editor} needs anchor gradients")
    nodes, labels = request.nodes, request.labels
    theta = model.theta.copy()
    acc_before = ctx.test_accuracy(model)
    train_before = ctx.train_loss(model)
    tg_curve, tr_curve, rmse_curve = [], [], []
    diagnostic = None
    steps = 0
    correct = np.zeros(len(nodes), dtype=bool)
    logits = None
    while True:
        current = model.with_theta(theta)
        tape = Tape()
        logits = forward(current, ctx.graph, ctx.adj, tape=tape)
        correct = np.argmax(logits[nodes], axis=1) == labels
        loss_tg, dlogits = softmax_cross_entropy(logits, labels, nodes)
        tg_curve.append(loss_tg)
        if record_curves:
            loss_tr, g_train = ctx.train_gradient(current)
            tr_curve.append(loss_tr)
        if not np.isfinite(loss_tg) or not np.all(np.isfinite(logits)):
            diagnostic = f"non-finite target loss at step {steps}"
            break
        if (stop_on_success and correct.all()) or steps >= request.max_steps:
            break
        tape.seed(loss_tg, dlogits)
        tape.trainable = model.editable_mask
        g_tg = backward(tape).data
        if record_curves:
            rmse_curve.append(grad_rmse(g_train, g_tg))
        g = rewire(editor, g_tg, anchors, lam, tolerance)
        theta = theta - request.step_size * g
        steps += 1
        if not np.all(np.isfinite(theta)):
            diagnostic = f"non-finite parameters after step {steps}"
            break

    edited = model.with_theta(theta)
    if diagnostic is not None:
        log.warning("edit of %s aborted: %s", nodes.tolist(), diagnostic)
        correct = np.zeros(len(nodes), dtype=bool)
        edited = model.clone()
        theta = edited.theta
        logits = None
    acc_after = ctx.test_accuracy(edited, logits if diagnostic is None else None)
    outcome = EditOutcome(
        targets=nodes.tolist(), success=bool(correct.all()), steps_used=steps,
        acc_before=acc_before, acc_after=acc_after, train_loss_before=train_before,
        train_loss_after=ctx.train_loss(edited), member_success=correct.tolist(),
        target_loss=tg_curve, train_loss=tr_curve, grad_rmse=rmse_curve, diagnostic=diagnostic)
    return edited, outcome


# --- protocols ---------------------------------------------------------------

@dataclass
class RunReport:
    editor: str
    protocol: str
    outcomes: list
    seed: int
    config: dict
    notes: list = field(default_factory=list)
    dd_curve: list = field(default_factory=list)

    @property
    def num_edits(self) -> int:
        return len(self.outcomes)

    @property
    def success_rate(self) -> float:
        if not self.outcomes:
            return float("nan")
        return sum(o.success for o in self.outcomes) / len(self.outcomes)

    def aggregates(self) -> dict:
        if not self.outcomes:
            return {"num_edits": 0, "SR": None, "acc_mean": None, "acc_std": None,
                    "dd_mean": None, "dd_std": None, "dd_success_mean": None}
        acc = np.array([100.0 * o.acc_after for o in self.outcomes])
        dd = np.array([o.dd for o in self.outcomes])
        ok = np.array([o.success for o in self.outcomes])
        agg = {"num_edits": len(self.outcomes), "SR": self.success_rate,
               "acc_mean": float(acc.mean()), "acc_std": float(acc.std()),
               "dd_mean": float(dd.mean()), "dd_std": float(dd.std()),
               "dd_success_mean": float(dd[ok].mean()) if ok.any() else None,
               "steps_mean": float(np.mean([o.steps_used for o in self.outcomes]))}
        members = [m for o in self.outcomes for m in o.member_success]
        if len(members) != len(self.outcomes):
            agg["member_success_rate"] = float(np.mean(members))
        if self.dd_curve:
            agg["final_cumulative_dd"] = self.dd_curve[-1]
        return agg

    def to_json(self) -> dict:
        return {"editor": self.editor, "protocol": self.protocol, "seed": self.seed,
                "config": self.config, "notes": self.notes, "aggregates": self.aggregates(),
                "dd_curve": self.dd_curve,
                "outcomes": [dict(asdict(o), dd=o.dd) for o in self.outcomes]}


def _protocol_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, PROTOCOL_STREAM])


def prepare_anchors(model: Model, ctx: EditContext, config: EditConfig,
                    anchors: AnchorGradientSet | None = None) -> AnchorGradientSet | None:
    """Anchors for ``config.editor``: ``None`` for GD, ``anchors`` if given,
    otherwise captured from ``model`` on the training subgraph."""
    if config.editor == "GD":
        return None
    if anchors is not None:
        if anchors.K != config.anchor_K:
            raise ValueError(f"{config.editor} expects K={config.anchor_K} anchors, got {anchors.K}")
        return anchors
    return capture_anchors(model, ctx.train_graph, ctx.train_adj, config.anchor_K, config.anchor_seed)


def _request(node, label, config: EditConfig) -> EditRequest:
    return EditRequest(node, label, config.max_steps, config.alpha)


def _independent_job(args):
    model, ctx, anchors, config, node = args
    _, outcome = edit_once(model, config.editor, anchors,
                           _request(int(node), int(ctx.graph.labels[node]), config),
                           ctx, config.lam, config.tolerance)
    return outcome


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("GRE_NUM_THREADS", "1")))
    except ValueError:
        return 1


def run_independent(model: Model, ctx: EditContext, config: EditConfig, num_edits: int = 50,
                    seed: int = 0, anchors: AnchorGradientSet | None = None,
                    workers: int = 1) -> RunReport:
    """Edit ``num_edits`` misclassified validation nodes, each starting from
    the same base model."""
    report = RunReport(config.editor, "independent", [], seed,
                       dict(asdict(config), num_edits=num_edits))
    pool = ctx.misclassified_valid(model)
    if len(pool) == 0:
        report.notes.append("no misclassified validation nodes; nothing to edit")
        return report
    replace = len(pool) < num_edits
    if replace:
        report.notes.append(f"only {len(pool)} misclassified validation nodes; targets drawn with replacement")
    targets = _protocol_rng(seed).choice(pool, size=num_edits, replace=replace)
    anchors = prepare_anchors(model, ctx, config, anchors)
    jobs = [(model, ctx, anchors, config, t) for t in targets]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            report.outcomes = list(ex.map(_independent_job, jobs))
    else:
        report.outcomes = [_independent_job(j) for j in jobs]
    return report


def run_sequential(model: Model, ctx: EditContext, config: EditConfig, num_edits: int = 50,
                   seed: int = 0, anchors: AnchorGradientSet | None = None) -> tuple[Model, RunReport]:
    """Chain edits: each edit starts from the previously edited model.

    The target pool is re-evaluated against the current model before every
    edit and a node is never targeted twice. ``dd_curve[i]`` is the test
    accuracy drop (percentage points) of the chain after ``i + 1`` edits,
    relative to the unedited model.
    """
    report = RunReport(config.editor, "sequential", [], seed,
                       dict(asdict(config), num_edits=num_edits))
    rng = _protocol_rng(seed)
    anchors = prepare_anchors(model, ctx, config, anchors)
    base_acc = ctx.test_accuracy(model)
    used: set[int] = set()
    current = model
    for i in range(num_edits):
        pool = np.array([n for n in ctx.misclassified_valid(current) if int(n) not in used], dtype=np.int64)
        if len(pool) == 0:
            report.notes.append(f"misclassified pool exhausted after {i} edits")
            break
        node = int(rng.choice(pool))
        used.add(node)
        if config.refresh_anchors and i > 0 and config.editor != "GD":
            anchors = capture_anchors(current, ctx.train_graph, ctx.train_adj,
                                      config.anchor_K, config.anchor_seed)
        current, outcome = edit_once(current, config.editor, anchors,
                                     _request(node, int(ctx.graph.labels[node]), config),
                                     ctx, config.lam, config.tolerance)
        report.outcomes.append(outcome)
        report.dd_curve.append(100.0 * (base_acc - outcome.acc_after))
    return current, report


def run_batch(model: Model, ctx: EditContext, config: EditConfig, batch_size: int = 10,
              num_rounds: int = 1, seed: int = 0,
              anchors: AnchorGradientSet | None = None) -> RunReport:
    """Each round edits ``batch_size`` misclassified validation nodes at once
    (mean target loss) starting from the same base model."""
    report = RunReport(config.editor, "batch", [], seed,
                       dict(asdict(config), batch_size=batch_size, num_rounds=num_rounds))
    pool = ctx.misclassified_valid(model)
    if len(pool) == 0:
        report.notes.append("no misclassified validation nodes; nothing to edit")
        return report
    rng = _protocol_rng(seed)
    anchors = prepare_anchors(model, ctx, config, anchors)
    replace = len(pool) < batch_size
    if replace:
        report.notes.append(f"only {len(pool)} misclassified validation nodes; batches drawn with replacement")
    for _ in range(num_rounds):
        batch = rng.choice(pool, size=batch_size, replace=replace)
        req = _request(tuple(int(b) for b in batch),
                       tuple(int(ctx.graph.labels[b]) for b in batch), config)
        _, outcome = edit_once(model, config.editor, anchors, req, ctx, config.lam, config.tolerance)
        report.outcomes.append(outcome)
    return report


MOTIVATION_METRICS = ("grad_rmse", "train_loss", "target_loss")


def run_motivation(models: dict, ctx: EditContext, steps: int = 20, num_targets: int = 50,
                   alpha: float = 0.01, seed: int = 0) -> list[dict]:
    """Plain gradient-descent editing for a fixed number of steps, averaged
    over ``num_targets`` misclassified validation targets per architecture.

    Returns rows ``{"step", "metric", "value", "arch"}``; ``grad_rmse`` is
    defined for the ``steps`` update steps, the losses for ``steps + 1``
    parameter states.
    """
    rows = []
    for arch, model in models.items():
        pool = ctx.misclassified_valid(model)
        if len(pool) == 0:
            log.warning("%s has no misclassified validation nodes", arch)
            continue
        targets = _protocol_rng(seed).choice(pool, size=num_targets, replace=len(pool) < num_targets)
        curves = {m: [] for m in MOTIVATION_METRICS}
        for t in targets:
            req = EditRequest(int(t), int(ctx.graph.labels[t]), steps, alpha)
            _, out = edit_once(model, "GD", None, req, ctx, record_curves=True, stop_on_success=False)
            curves["grad_rmse"].append(out.grad_rmse)
            curves["train_loss"].append(out.train_loss)
            curves["target_loss"].append(out.target_loss)
        for metric in MOTIVATION_METRICS:
            mean = np.mean(np.array(curves[metric]), axis=0)
            rows += [{"step": i, "metric": metric, "value": float(v), "arch": arch}
                     for i, v in enumerate(mean)]
    return rows


def sweep(model: Model, ctx: EditContext, base: EditConfig, editors=("GRE", "GRE+"),
          lambda_grid=(0.0, 0.1, 1.0, 10.0, 50.0), K_grid=(1, 2, 3, 5), num_edits: int = 50,
          seed: int = 0, workers: int = 1) -> list[dict]:
    """Independent-protocol runs over the full lambda x K grid.

    GRE+ gets one row per (lambda, K); GRE one per lambda (K = 1); GD a
    single baseline row.
    """
    rows = []
    anchor_cache: dict[int, AnchorGradientSet] = {}
    for editor in editors:
        if editor == "GD":
            grid = [(0.0, 1)]
        elif editor == "GRE":
            grid = [(lam, 1) for lam in lambda_grid]
        else:
            grid = [(lam, K) for lam in lambda_grid for K in K_grid]
        for lam, K in grid:
            cfg = EditConfig(editor, lam, K, base.alpha, base.max_steps, base.tolerance,
                             base.anchor_seed)
            anchors = None
            if editor != "GD":
                if K not in anchor_cache:
                    anchor_cache[K] = capture_anchors(model, ctx.train_graph, ctx.train_adj, K,
                                                      base.anchor_seed)
                anchors = anchor_cache[K]
            agg = run_independent(model, ctx, cfg, num_edits, seed, anchors, workers).aggregates()
            rows.append({"editor": editor, "lambda": lam, "K": K if editor != "GD" else "",
                         "SR": agg["SR"], "DD_mean": agg["dd_mean"], "DD_std": agg["dd_std"],
                         "acc_mean": agg["acc_mean"]})
    return rows


# --- files -----------------------------------------------------------------

SUMMARY_FIELDS = ("editor", "target", "success", "steps", "acc_before", "acc_after", "dd")


def write_rows_csv(rows: list[dict], path, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})


def report_curves(report: RunReport) -> list[dict]:
    rows = [{"step": i + 1, "metric": "cumulative_dd", "value": v, "arch": report.config.get("arch", "")}
            for i, v in enumerate(report.dd_curve)]
    if report.outcomes:
        longest = max(len(o.target_loss) for o in report.outcomes)
        for s in range(longest):
            vals = [o.target_loss[min(s, len(o.target_loss) - 1)] for o in report.outcomes if o.target_loss]
            if vals:
                rows.append({"step": s, "metric": "target_loss", "value": float(np.mean(vals)),
                             "arch": report.config.get("arch", "")})
    return rows


def write_report(report: RunReport, outdir) -> None:
    """Write ``report.json``, ``summary.csv`` and ``curves.csv``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    summary = [{"editor": report.editor, "target": " ".join(map(str, o.targets)),
                "success": int(o.success), "steps": o.steps_used, "acc_before": o.acc_before,
                "acc_after": o.acc_after, "dd": o.dd} for o in report.outcomes]
    write_rows_csv(summary, outdir / "summary.csv", SUMMARY_FIELDS)
    write_rows_csv(report_curves(report), outdir / "curves.csv", ("step", "metric", "value", "arch"))
