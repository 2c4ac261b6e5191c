"""Anchor gradients and gradient rewiring (GRE / GRE+).

Both rewirers solve

    min_g  1/2 ||g - g_tg||^2 + lam/2 ||g||^2   s.t.  G g >= 0

through its dual, a non-negative QP in one variable per anchor row:

    min_{v >= 0}  1/2 v^T P v + q^T v,   P = G G^T / (1 + lam),  q = G g_tg / (1 + lam)

with primal recovery ``g* = (G^T v* + g_tg) / (1 + lam)`` from stationarity
``(1 + lam) g - g_tg - G^T v = 0``.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Model, loss_and_grad

log = logging.getLogger(__name__)

MAX_ANCHORS = 32
ENUMERATION_LIMIT = 20
DEGENERATE_NORM_SQ = 1e-30


class QPSolverError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class AnchorGradientSet:
    """Training-subset gradients stored before editing.

    ``G[k]`` is the gradient of the mean CE over subset ``k`` restricted to the
    model's editable coordinates. ``assignment[i]`` is the subset of training
    node ``i`` (training-subgraph indexing).
    """

    G: np.ndarray
    assignment: np.ndarray
    fingerprint: str

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        if not 1 <= G.shape[0] <= MAX_ANCHORS:
            raise ValueError(f"need 1 <= K <= {MAX_ANCHORS}, got {G.shape[0]}")
        G.setflags(write=False)
        object.__setattr__(self, "G", G)

    @property
    def K(self) -> int:
        return self.G.shape[0]

    def subsets(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == k) for k in range(self.K)]


@dataclass(frozen=True)
class RewireConfig:
    lam: float = 0.0
    K: int = 1
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if not 1 <= self.K <= MAX_ANCHORS:
            raise ValueError(f"K must lie in [1, {MAX_ANCHORS}]")


@dataclass(frozen=True)
class QPProblem:
    P: np.ndarray
    q: np.ndarray

    def objective(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        return float(0.5 * v @ self.P @ v + self.q @ v)


def capture_anchors(model: Model, train_graph, train_adj, K: int = 1, seed: int = 0,
                    nodes=None) -> AnchorGradientSet:
    """Shuffle the training nodes, deal them round-robin into ``K`` subsets and
    store each subset's mean-CE gradient."""
    nodes = np.arange(train_graph.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > len(nodes):
        raise ValueError(f"K={K} exceeds the number of training nodes ({len(nodes)})")
    order = np.random.default_rng(seed).permutation(nodes)
    assignment = np.full(train_graph.num_nodes, -1, dtype=np.int64)
    assignment[order] = np.arange(len(order)) % K
    rows = []
    for k in range(K):
        _, g = loss_and_grad(model, train_graph, train_adj, np.flatnonzero(assignment == k))
        rows.append(g.data)
    return AnchorGradientSet(np.stack(rows), assignment, model.fingerprint())


def gre_dual(g_tg: np.ndarray, g_train: np.ndarray) -> tuple[float, bool]:
    """Closed-form dual multiplier for one anchor and a degenerate-anchor flag."""
    a = float(g_train @ g_train)
    if a < DEGENERATE_NORM_SQ:
        return 0.0, True
    return max(0.0, -float(g_train @ g_tg) / a), False


def gre_rewire(g_tg, g_train, lam: float = 0.0) -> np.ndarray:
    """Project ``g_tg`` onto ``{g : g_train . g >= 0}`` and scale by ``1/(1+lam)``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    g_tg = np.asarray(g_tg, dtype=np.float64)
    g_train = np.asarray(g_train, dtype=np.float64)
    if g_train.ndim == 2:
        if g_train.shape[0] != 1:
            raise ValueError("GRE takes exactly one anchor row; use gre_plus_rewire for K > 1")
        g_train = g_train[0]
    v, degenerate = gre_dual(g_tg, g_train)
    if degenerate:
        log.warning("training gradient is numerically zero; constraint dropped")
    return (g_tg + v * g_train) / (1.0 + lam)


def build_dual_qp(G, g_tg, lam: float = 0.0) -> QPProblem:
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    s = 1.0 / (1.0 + lam)
    return QPProblem(s * (G @ G.T), s * (G @ np.asarray(g_tg, dtype=np.float64)))


def gre_plus_rewire(g_tg, G, lam: float = 0.0, tolerance: float = 1e-8) -> np.ndarray:
    """Rewire against ``K`` anchor rows via the dual non-negative QP.

    The dual minimiser does not depend on ``lam`` (it only scales the
    objective), so the QP is solved unscaled and ``lam`` enters through the
    recovery alone.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    g_tg = np.asarray(g_tg, dtype=np.float64)
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    live = np.einsum("kl,kl->k", G, G) >= DEGENERATE_NORM_SQ
    if not live.all():
        log.warning("%d anchor row(s) numerically zero; their constraints are dropped",
                    int((~live).sum()))
        G = G[live]
        if len(G) == 0:
            return g_tg / (1.0 + lam)
    if len(G) == 1:
        v = np.array([gre_dual(g_tg, G[0])[0]])
    else:
        v = solve_nonneg_qp(G @ G.T, G @ g_tg, tol=tolerance)
    return (G.T @ v + g_tg) / (1.0 + lam)


def _scaled_tol(P, q, tol):
    mag = max(float(np.abs(P).max(initial=0.0)), float(np.abs(q).max(initial=0.0)))
    return tol * mag if mag > 0 else tol


def _enumerate_active_sets(P, q, tol):
    K = len(q)
    best, best_obj = None, np.inf
    for r in range(K + 1):
        for free in itertools.combinations(range(K), r):
            free = list(free)
            v = np.zeros(K)
            if free:
                Pff = P[np.ix_(free, free)]
                try:
                    vf = np.linalg.solve(Pff, -q[free])
                except np.linalg.LinAlgError:
                    vf = np.linalg.pinv(Pff) @ -q[free]
                if np.any(vf < -tol):
                    continue
                v[free] = np.maximum(vf, 0.0)
            grad = P @ v + q
            clamped = np.setdiff1d(np.arange(K), free)
            if np.any(grad[clamped] < -tol):
                continue
            if np.any(np.abs(grad[free]) > tol):
                continue
            obj = 0.5 * v @ P @ v + q @ v
            if obj < best_obj:
                best, best_obj = v, obj
    return best


def _projected_gradient(P, q, iters=20000):
    eig = float(np.linalg.eigvalsh(P).max())
    step = 1.0 / eig if eig > 0 else 1.0
    v = np.zeros(len(q))
    for _ in range(iters):
        v_new = np.maximum(v - step * (P @ v + q), 0.0)
        if np.max(np.abs(v_new - v)) < 1e-15 * max(1.0, np.max(np.abs(v))):
            return v_new
        v = v_new
    return v


def solve_nonneg_qp(P, q, tol: float = 1e-8) -> np.ndarray:
    """Exact minimiser of ``1/2 v^T P v + q^T v`` over ``v >= 0`` for PSD ``P``.

    Enumerates every free set of coordinates (``2^K`` candidates) and keeps
    the KKT point with least objective. Above ``ENUMERATION_LIMIT`` variables a
    projected-gradient iteration is used instead. ``tol`` is relative to the
    magnitude of ``P`` and ``q``.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64).ravel()
    if P.shape != (len(q), len(q)):
        raise ValueError(f"P has shape {P.shape}, q has length {len(q)}")
    if len(q) > MAX_ANCHORS:
        raise ValueError(f"at most {MAX_ANCHORS} variables supported")
    if np.all(q >= 0):
        return np.zeros(len(q))
    stol = _scaled_tol(P, q, tol)
    v = _enumerate_active_sets(P, q, stol) if len(q) <= ENUMERATION_LIMIT else None
    if v is None or not check_kkt(P, q, v, stol)["passed"]:
        v = _projected_gradient(P, q)
        if not check_kkt(P, q, v, stol)["passed"]:
            raise QPSolverError("no KKT point found for the non-negative QP")
    return v


def check_kkt(P, q, v, tol: float = 1e-8) -> dict:
    """KKT residuals of ``v`` for ``min 1/2 v^T P v + q^T v, v >= 0``.

    ``residual`` is ``max |min(v, Pv + q)|``, which vanishes exactly at KKT
    points; the other entries break it down by condition.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    grad = P @ v + q
    nat = np.minimum(v, grad)
    report = {
        "stationarity": float(np.max(np.abs(grad[v > 0]), initial=0.0)),
        "primal_feas": float(np.max(-v, initial=0.0).clip(min=0.0)),
        "dual_feas": float(np.max(-grad, initial=0.0).clip(min=0.0)),
        "comp_slack": float(np.max(np.abs(v * grad), initial=0.0)),
        "residual": float(np.max(np.abs(nat), initial=0.0)),
    }
    report["passed"] = report["residual"] <= tol
    return report


def rewire(editor: str, g_tg: np.ndarray, anchors: AnchorGradientSet | None,
           lam: float = 0.0, tolerance: float = 1e-8) -> np.ndarray:
    """Dispatch on editor name: ``GD`` passes ``g_tg`` through."""
    if editor == "GD":
        return g_tg
    if anchors is None:
        raise ValueError(f"{editor} needs anchor gradients")
    if editor == "GRE":
        if anchors.K != 1:
            raise ValueError(f"GRE uses a single anchor row, got K={anchors.K}")
        return gre_rewire(g_tg, anchors.G, lam)
    if editor == "GRE+":
        return gre_plus_rewire(g_tg, anchors.G, lam, tolerance)
    raise ValueError(f"unknown editor {editor!r}")


def save_anchors(anchors: AnchorGradientSet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "anchors.f64").write_bytes(anchors.G.astype("<f8").tobytes())
    meta = {"K": anchors.K, "num_params": anchors.G.shape[1],
            "assignment": anchors.assignment.tolist(), "fingerprint": anchors.fingerprint}
    (path / "anchors.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_anchors(path, expected_fingerprint: str | None = None) -> AnchorGradientSet:
    path = Path(path)
    meta = json.loads((path / "anchors.json").read_text())
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise ValueError(f"anchor fingerprint {meta['fingerprint']} does not match "
                         f"model fingerprint {expected_fingerprint}")
    G = np.frombuffer((path / "anchors.f64").read_bytes(), dtype="<f8").astype(np.float64)
    G = G.reshape(meta["K"], meta["num_params"])
    return AnchorGradientSet(G, np.asarray(meta["assignment"], dtype=np.int64), meta["fingerprint"])
