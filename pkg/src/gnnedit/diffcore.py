"""Numeric kernels with hand-written reverse passes.

Every model in this package is a fixed chain of a handful of primitives
(affine maps, sparse propagation, ReLU, dropout, softmax cross-entropy), so
instead of a general autodiff engine each primitive comes with its paired
backward function and a :class:`Tape` records what the model's backward pass
needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class LayoutMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class ParamLayout:
    """Ordered, contiguous placement of named tensors in one flat vector."""

    specs: tuple[TensorSpec, ...]

    @classmethod
    def from_shapes(cls, shapes) -> "ParamLayout":
        specs, offset = [], 0
        for name, shape in shapes:
            spec = TensorSpec(name, tuple(int(s) for s in shape), offset)
            specs.append(spec)
            offset += spec.size
        return cls(tuple(specs))

    @property
    def size(self) -> int:
        return sum(s.size for s in self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def __getitem__(self, name: str) -> TensorSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    def views(self, data: np.ndarray) -> dict[str, np.ndarray]:
        """Reshaped views into ``data``; writes go through to the flat vector."""
        if data.shape != (self.size,):
            raise LayoutMismatchError(f"vector of length {data.shape} for layout of size {self.size}")
        return {s.name: data[s.offset:s.offset + s.size].reshape(s.shape) for s in self.specs}

    def prefixed(self, prefix: str, start: int = 0) -> "ParamLayout":
        return ParamLayout(tuple(TensorSpec(prefix + s.name, s.shape, s.offset + start)
                                 for s in self.specs))

    def concat(self, other: "ParamLayout") -> "ParamLayout":
        shift = self.size
        return ParamLayout(self.specs + tuple(TensorSpec(s.name, s.shape, s.offset + shift)
                                              for s in other.specs))

    def to_json(self) -> list:
        return [[s.name, list(s.shape)] for s in self.specs]


@dataclass(eq=False)
class FlatVector:
    data: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.layout.size,):
            raise LayoutMismatchError(
                f"data has shape {self.data.shape}, layout expects ({self.layout.size},)")

    def views(self) -> dict[str, np.ndarray]:
        return self.layout.views(self.data)

    def copy(self):
        return type(self)(self.data.copy(), self.layout)

    def __len__(self):
        return len(self.data)


class ParamVector(FlatVector):
    """Model parameters theta flattened in layout order."""


class GradientVector(FlatVector):
    """A gradient aligned with some :class:`ParamVector` layout."""


def _check(a: FlatVector, b: FlatVector):
    if a.layout != b.layout:
        raise LayoutMismatchError("vectors have different layouts")


def dot(a: FlatVector, b: FlatVector) -> float:
    _check(a, b)
    return float(a.data @ b.data)


def norm(a: FlatVector) -> float:
    return float(np.linalg.norm(a.data))


def scale(a: FlatVector, c: float) -> GradientVector:
    return GradientVector(c * a.data, a.layout)


def axpy(alpha: float, x: FlatVector, y: FlatVector) -> FlatVector:
    """Return ``alpha * x + y`` with the type of ``y``."""
    _check(x, y)
    return type(y)(alpha * x.data + y.data, y.layout)


# --- primitives -----------------------------------------------------------

def affine(X: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if X.shape[1] != W.shape[0]:
        raise ValueError(f"affine: inner dimensions {X.shape} x {W.shape} disagree")
    out = X @ W
    if b is not None:
        out = out + b
    return out


def affine_backward(dout: np.ndarray, X: np.ndarray, W: np.ndarray):
    """Gradients ``(dX, dW, db)`` of ``X @ W + b``."""
    return dout @ W.T, X.T @ dout, dout.sum(axis=0)


def spmm(adj, X: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``adj @ X``.

    ``adj`` is either a scipy sparse matrix or a
    :class:`~gnnedit.graphcore.NormalizedAdjacency` (its GCN operator is used).
    """
    m = getattr(adj, "matrix", adj)
    if m.shape[1] != X.shape[0]:
        raise ValueError(f"spmm: adjacency {m.shape} does not match features {X.shape}")
    return np.asarray(m @ X)


def spmm_backward(dout: np.ndarray, adj) -> np.ndarray:
    m = getattr(adj, "matrix", adj)
    return np.asarray(m.T @ dout)


def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(dout: np.ndarray, X: np.ndarray) -> np.ndarray:
    return dout * (X > 0)


def dropout_mask(shape, rate: float, rng) -> np.ndarray | None:
    """Inverted-dropout mask; ``None`` means identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return None
    rng = np.random.default_rng(rng)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout(X: np.ndarray, rate: float, rng=None, training: bool = False):
    """Apply inverted dropout when ``training``; returns ``(out, mask)``."""
    if not training:
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        return X, None
    mask = dropout_mask(X.shape, rate, rng)
    return (X if mask is None else X * mask), mask


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels, nodes, weights=None):
    """Weighted cross-entropy over the rows ``nodes`` of ``logits``.

    ``weights`` defaults to uniform ``1/len(nodes)`` (the mean loss).
    Returns ``(loss, dlogits)`` where ``dlogits`` has the full shape of
    ``logits`` and is zero outside ``nodes``.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("cross-entropy over an empty node selection")
    labels = np.asarray(labels, dtype=np.int64)
    y = labels[nodes] if len(labels) == len(logits) else labels
    if len(y) != len(nodes):
        raise ValueError("labels must cover either all rows or exactly the selected nodes")
    w = np.full(len(nodes), 1.0 / len(nodes)) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = log_softmax(logits[nodes])
    loss = -float(np.sum(w * logp[np.arange(len(nodes)), y]))
    p = np.exp(logp)
    p[np.arange(len(nodes)), y] -= 1.0
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, nodes, w[:, None] * p)
    return loss, dlogits


# --- tape -------------------------------------------------------------------

class TapeError(RuntimeError):
    pass


class Tape:
    """Single-use record of one forward pass.

    A model forward stores the intermediates it needs under string keys and
    registers the function that turns ``dlogits`` into a flat gradient. The
    loss function then seeds the tape with ``dlogits``.
    """

    def __init__(self):
        self.values: dict[str, object] = {}
        self._backward_fn: Callable | None = None
        self._dlogits: np.ndarray | None = None
        self._used = False
        self.loss: float | None = None

    def save(self, key: str, value):
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def set_backward(self, fn: Callable[["Tape", np.ndarray], np.ndarray], layout: ParamLayout,
                     trainable: np.ndarray | None = None):
        self._backward_fn = fn
        self.layout = layout
        self.trainable = trainable

    def seed(self, loss: float, dlogits: np.ndarray):
        if self._backward_fn is None:
            raise TapeError("loss recorded before any forward pass")
        self.loss = loss
        self._dlogits = dlogits


def backward(tape: Tape) -> GradientVector:
    """Reverse pass over a recorded tape.

    Coordinates outside ``tape.trainable`` (when set) come back as exact zeros.
    """
    if tape._backward_fn is None:
        raise TapeError("backward called without a recorded forward pass")
    if tape._dlogits is None:
        raise TapeError("backward called before a loss was recorded")
    if tape._used:
        raise TapeError("tape already consumed")
    tape._used = True
    g = tape._backward_fn(tape, tape._dlogits)
    if tape.trainable is not None:
        g = np.where(tape.trainable, g, 0.0)
    return GradientVector(g, tape.layout)


def finite_diff_gradient(f: Callable[[np.ndarray], float], theta, eps: float = 1e-6,
                         coords=None) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``theta``.

    ``theta`` may be a :class:`ParamVector` or a plain array; ``coords``
    restricts evaluation to a subset of coordinates (others are left 0).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    layout = getattr(theta, "layout", None)
    x = np.array(getattr(theta, "data", theta), dtype=np.float64)
    g = np.zeros_like(x)
    idx = range(len(x)) if coords is None else coords
    for i in idx:
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return GradientVector(g, layout) if layout is not None else g
