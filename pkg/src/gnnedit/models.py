"""MLP, GCN and GraphSAGE node classifiers, the EGNN peer-MLP wrapper,
full-batch training and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .diffcore import (ParamLayout, ParamVector, GradientVector, Tape, affine, affine_backward,
                       backward, dropout, relu, relu_backward, softmax_cross_entropy, spmm,
                       spmm_backward)
from .graphcore import Graph, NormalizedAdjacency

log = logging.getLogger(__name__)

KINDS = ("mlp", "gcn", "sage", "egnn-gcn", "egnn-sage")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Architecture:
    kind: str
    in_dim: int
    out_dim: int
    num_layers: int = 2
    hidden_dim: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}; expected one of {KINDS}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def is_egnn(self) -> bool:
        return self.kind.startswith("egnn-")

    @property
    def base_kind(self) -> str:
        return self.kind[len("egnn-"):] if self.is_egnn else self.kind

    def dims(self) -> list[tuple[int, int]]:
        sizes = [self.in_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.out_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    def layout(self) -> ParamLayout:
        if self.is_egnn:
            base = _stack_layout(self.base_kind, self.dims()).prefixed("base.")
            peer = _stack_layout("mlp", self.dims()).prefixed("mlp.")
            return base.concat(peer)
        return _stack_layout(self.kind, self.dims())

    def to_json(self) -> dict:
        return asdict(self)


def _stack_layout(kind: str, dims) -> ParamLayout:
    shapes = []
    for l, (din, dout) in enumerate(dims):
        if kind == "sage":
            shapes += [(f"Ws{l}", (din, dout)), (f"Wn{l}", (din, dout))]
        else:
            shapes.append((f"W{l}", (din, dout)))
        shapes.append((f"b{l}", (dout,)))
    return ParamLayout.from_shapes(shapes)


@dataclass(frozen=True, eq=False)
class Model:
    arch: Architecture
    params: ParamVector
    editable_mask: np.ndarray
    seed: int = 0

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    @property
    def theta(self) -> np.ndarray:
        return self.params.data

    def with_theta(self, theta: np.ndarray) -> "Model":
        return replace(self, params=ParamVector(np.array(theta, dtype=np.float64), self.layout))

    def clone(self) -> "Model":
        return self.with_theta(self.theta)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.arch.to_json(), sort_keys=True).encode())
        h.update(self.theta.astype("<f8").tobytes())
        return h.hexdigest()[:16]


def _editable_mask(arch: Architecture, layout: ParamLayout) -> np.ndarray:
    mask = np.zeros(layout.size, dtype=bool)
    for s in layout.specs:
        if not arch.is_egnn or s.name.startswith("mlp."):
            mask[s.offset:s.offset + s.size] = True
    mask.setflags(write=False)
    return mask


def _glorot_fill(views: dict, rng, zero_last: bool = False, num_layers: int | None = None):
    for name, v in views.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b"):
            v[...] = 0.0
            continue
        layer = int(leaf.lstrip("WsWn"))
        if zero_last and layer == num_layers - 1:
            v[...] = 0.0
            continue
        fan_in, fan_out = v.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        v[...] = rng.uniform(-bound, bound, size=v.shape)


def init_model(arch: Architecture, seed: int = 0) -> Model:
    """Glorot-uniform weights and zero biases.

    For EGNN kinds the peer MLP's output layer is zero so the wrapped model
    predicts exactly what its base does.
    """
    layout = arch.layout()
    theta = np.zeros(layout.size)
    views = layout.views(theta)
    rng = np.random.default_rng(seed)
    if arch.is_egnn:
        base = {k: v for k, v in views.items() if k.startswith("base.")}
        peer = {k: v for k, v in views.items() if k.startswith("mlp.")}
        _glorot_fill(base, rng)
        _glorot_fill(peer, np.random.default_rng([seed, 1]), zero_last=True,
                     num_layers=arch.num_layers)
    else:
        _glorot_fill(views, rng)
    return Model(arch, ParamVector(theta, layout), _editable_mask(arch, layout), seed)


def stitch_egnn(base: Model, seed: int | None = None) -> Model:
    """Wrap a trained GCN/SAGE with an architecture-matched peer MLP.

    Only the peer MLP is editable; its zero output layer keeps every logit of
    the base model unchanged.
    """
    if base.arch.is_egnn:
        raise ValueError("model is already EGNN-stitched")
    if base.arch.kind not in ("gcn", "sage"):
        raise ValueError(f"EGNN stitching needs a GCN or SAGE base, got {base.arch.kind!r}")
    seed = base.seed if seed is None else seed
    arch = replace(base.arch, kind="egnn-" + base.arch.kind)
    fresh = init_model(arch, seed)
    theta = fresh.theta.copy()
    theta[:base.layout.size] = base.theta
    return Model(arch, ParamVector(theta, fresh.layout), fresh.editable_mask, seed)


# --- forward / backward -----------------------------------------------------

def _stack_forward(kind, P, prefix, X, adj, num_layers, rate, training, rng, tape):
    h = X
    for l in range(num_layers):
        last = l == num_layers - 1
        key = f"{prefix}{l}"
        if kind == "mlp":
            z = affine(h, P[f"{prefix}W{l}"], P[f"{prefix}b{l}"])
        elif kind == "gcn":
            z = spmm(adj, h @ P[f"{prefix}W{l}"]) + P[f"{prefix}b{l}"]
        else:
            m = np.asarray(adj.mean @ h)
            z = h @ P[f"{prefix}Ws{l}"] + m @ P[f"{prefix}Wn{l}"] + P[f"{prefix}b{l}"]
            if tape is not None:
                tape.save(key + ".m", m)
        if tape is not None:
            tape.save(key + ".h", h)
            tape.save(key + ".z", z)
        if last:
            return z
        h = relu(z)
        h, mask = dropout(h, rate, rng, training)
        if tape is not None:
            tape.save(key + ".mask", mask)


def _stack_backward(kind, P, G, prefix, dz, adj, num_layers, tape):
    for l in reversed(range(num_layers)):
        key = f"{prefix}{l}"
        h = tape[key + ".h"]
        G[f"{prefix}b{l}"] += dz.sum(axis=0)
        if kind == "mlp":
            dh, dW, _ = affine_backward(dz, h, P[f"{prefix}W{l}"])
            G[f"{prefix}W{l}"] += dW
        elif kind == "gcn":
            dhw = spmm_backward(dz, adj)
            G[f"{prefix}W{l}"] += h.T @ dhw
            dh = dhw @ P[f"{prefix}W{l}"].T
        else:
            m = tape[key + ".m"]
            G[f"{prefix}Ws{l}"] += h.T @ dz
            G[f"{prefix}Wn{l}"] += m.T @ dz
            dh = dz @ P[f"{prefix}Ws{l}"].T + np.asarray(adj.mean.T @ (dz @ P[f"{prefix}Wn{l}"].T))
        if l == 0:
            return
        prev = f"{prefix}{l - 1}"
        mask = tape[prev + ".mask"]
        if mask is not None:
            dh = dh * mask
        dz = relu_backward(dh, tape[prev + ".z"])


def _parts(arch: Architecture):
    if arch.is_egnn:
        return [(arch.base_kind, "base."), ("mlp", "mlp.")]
    return [(arch.kind, "")]


def forward(model: Model, graph: Graph, adj: NormalizedAdjacency | None = None, *,
            training: bool = False, rng=None, tape: Tape | None = None) -> np.ndarray:
    """Logits ``(n, C)``. ``adj`` may be omitted for MLPs."""
    arch = model.arch
    X = graph.features
    if X.shape[1] != arch.in_dim:
        raise ValueError(f"feature dim {X.shape[1]} != architecture input dim {arch.in_dim}")
    if arch.kind != "mlp" and adj is None:
        raise ValueError(f"{arch.kind} forward needs an adjacency")
    if adj is not None and adj.num_nodes != graph.num_nodes:
        raise ValueError("adjacency does not match graph size")
    P = model.layout.views(model.theta)
    if training:
        rng = np.random.default_rng(rng)
    logits = None
    for kind, prefix in _parts(arch):
        out = _stack_forward(kind, P, prefix, X, adj, arch.num_layers, arch.dropout,
                             training, rng, tape)
        logits = out if logits is None else logits + out
    if tape is not None:
        def _bw(t, dlogits):
            g = np.zeros(model.layout.size)
            G = model.layout.views(g)
            for kind, prefix in _parts(arch):
                _stack_backward(kind, P, G, prefix, dlogits, adj, arch.num_layers, t)
            return g
        tape.set_backward(_bw, model.layout)
    return logits


def loss_and_grad(model: Model, graph: Graph, adj: NormalizedAdjacency | None, nodes,
                  labels=None, weights=None, *, editable_only: bool = True,
                  training: bool = False, rng=None) -> tuple[float, GradientVector]:
    """Mean (or weighted) CE over ``nodes`` and its parameter gradient.

    With ``editable_only`` the gradient is zero outside ``model.editable_mask``.
    """
    tape = Tape()
    logits = forward(model, graph, adj, training=training, rng=rng, tape=tape)
    labels = graph.labels if labels is None else labels
    loss, dlogits = softmax_cross_entropy(logits, labels, nodes, weights)
    tape.seed(loss, dlogits)
    if editable_only:
        tape.trainable = model.editable_mask
    return loss, backward(tape)


def loss_value(model: Model, graph: Graph, adj, nodes, labels=None) -> float:
    logits = forward(model, graph, adj)
    labels = graph.labels if labels is None else labels
    return softmax_cross_entropy(logits, labels, nodes)[0]


def predict(model: Model, graph: Graph, adj=None, node_ids=None) -> np.ndarray:
    """Argmax class per node; ties go to the lowest class index."""
    logits = forward(model, graph, adj)
    if node_ids is not None:
        logits = logits[np.asarray(node_ids, dtype=np.int64)]
    return np.argmax(logits, axis=1)


def accuracy(model: Model, graph: Graph, adj, node_ids) -> float:
    node_ids = np.asarray(node_ids, dtype=np.int64)
    if node_ids.size == 0:
        return float("nan")
    return float(np.mean(predict(model, graph, adj, node_ids) == graph.labels[node_ids]))


def train_base(model: Model, graph: Graph, adj, epochs: int = 200, lr: float = 0.01,
               nodes=None, optimizer: str = "adam") -> tuple[Model, list[float]]:
    """Full-batch training on the mean CE over ``nodes``.

    ``nodes`` defaults to every node of ``graph``, which is the training
    subgraph in the inductive setting. ``optimizer`` is ``"adam"`` (default
    betas, eps 1e-8) or ``"gd"``. Dropout is active; its mask stream is
    seeded from ``model.seed``. Returns the trained copy and per-epoch loss.
    """
    if optimizer not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    nodes = np.arange(graph.num_nodes) if nodes is None else np.asarray(nodes)
    theta = model.theta.copy()
    rng = np.random.default_rng([model.seed, 2])
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    curve = []
    for epoch in range(epochs):
        loss, g = loss_and_grad(model.with_theta(theta), graph, adj, nodes, training=True, rng=rng)
        if not np.isfinite(loss) or not np.all(np.isfinite(g.data)):
            raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch} (lr={lr})")
        curve.append(loss)
        if optimizer == "gd":
            theta -= lr * g.data
            continue
        m = beta1 * m + (1 - beta1) * g.data
        v = beta2 * v + (1 - beta2) * g.data ** 2
        m_hat = m / (1 - beta1 ** (epoch + 1))
        v_hat = v / (1 - beta2 ** (epoch + 1))
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return model.with_theta(theta), curve


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"arch": model.arch.to_json(), "seed": model.seed,
            "layout": model.layout.to_json(), "num_params": model.layout.size,
            "fingerprint": model.fingerprint()}
    (path / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "params.f64").write_bytes(model.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    arch = Architecture(**meta["arch"])
    layout = arch.layout()
    theta = np.frombuffer((path / "params.f64").read_bytes(), dtype="<f8").astype(np.float64)
    if theta.shape != (layout.size,):
        raise ValueError(f"params.f64 holds {theta.size} values, architecture needs {layout.size}")
    model = Model(arch, ParamVector(theta, layout), _editable_mask(arch, layout), meta["seed"])
    if "fingerprint" in meta and meta["fingerprint"] != model.fingerprint():
        raise ValueError("checkpoint fingerprint does not match its parameters")
    return model
