"""Graphs, normalized adjacency, stratified splits and synthetic SBM data."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GraphFormatError(ValueError):
    """Raised when a graph directory or in-memory graph is malformed."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def canonical_edges(edges, num_nodes: int) -> np.ndarray:
    """Symmetrize, drop self-loops and deduplicate an edge list.

    Returns an ``(m, 2)`` int64 array with ``u < v`` on every row, sorted
    lexicographically.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise GraphFormatError(f"edge endpoint out of range [0, {num_nodes})")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected node-classification graph.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``.
    ``origin`` maps node indices back to a parent graph for induced
    subgraphs and is ``None`` otherwise.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    origin: np.ndarray | None = None

    def __post_init__(self):
        n = self.num_nodes
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise GraphFormatError(f"features must be {n} x d, got {feats.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise GraphFormatError(f"labels must have length {n}, got {labels.shape}")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise GraphFormatError(f"labels must lie in [0, {self.num_classes})")
        edges = canonical_edges(self.edges, n)
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "edges", _frozen(edges))
        if self.origin is not None:
            object.__setattr__(self, "origin", _frozen(np.asarray(self.origin, dtype=np.int64)))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency ``A`` without self-loops."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def row_normalized(self) -> "Graph":
        """Copy of the graph with each feature row scaled to unit L1 norm."""
        s = np.abs(self.features).sum(axis=1, keepdims=True)
        s[s == 0] = 1.0
        return Graph(self.num_nodes, self.edges, self.features / s, self.labels,
                     self.num_classes, self.origin)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Propagation operators for one graph.

    ``matrix`` is the symmetric GCN operator ``D^-1/2 (A + I) D^-1/2`` and
    ``mean`` the neighbour-averaging operator used by the SAGE layer (rows of
    isolated nodes are empty).
    """

    matrix: sp.csr_matrix
    mean: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]


def build_normalized_adjacency(graph: Graph) -> NormalizedAdjacency:
    a = graph.adjacency()
    n = graph.num_nodes
    a_hat = (a + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    norm = (d_inv_sqrt @ a_hat @ d_inv_sqrt).tocsr()
    norm.sort_indices()

    nbr = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros(n)
    inv[nbr > 0] = 1.0 / nbr[nbr > 0]
    mean = (sp.diags(inv) @ a).tocsr()
    mean.sort_indices()
    return NormalizedAdjacency(norm, mean)


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    train_mask: np.ndarray
    valid_mask: np.ndarray
    test_mask: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.valid_mask, self.test_mask)]
        if not (masks[0].shape == masks[1].shape == masks[2].shape):
            raise ValueError("split masks must share one shape")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise ValueError("split masks must be disjoint")
        for name, m in zip(("train_mask", "valid_mask", "test_mask"), masks):
            object.__setattr__(self, name, _frozen(m))

    @property
    def train_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def valid_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.valid_mask)

    @property
    def test_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask)

    def to_json(self) -> dict:
        return {"train": self.train_nodes.tolist(),
                "valid": self.valid_nodes.tolist(),
                "test": self.test_nodes.tolist()}

    @classmethod
    def from_indices(cls, num_nodes: int, train, valid, test, seed=None) -> "SplitAssignment":
        masks = []
        for idx in (train, valid, test):
            m = np.zeros(num_nodes, dtype=bool)
            m[np.asarray(idx, dtype=np.int64)] = True
            masks.append(m)
        return cls(*masks, seed=seed)


def split_stratified(labels, train_per_class: int = 20, valid_per_class: int = 30,
                     seed: int = 0, num_classes: int | None = None) -> SplitAssignment:
    """Per-class random split into train / valid / test.

    Each class gives ``train_per_class`` nodes to train and ``valid_per_class``
    to valid, the remainder going to test. A class smaller than the combined
    quota gives ``floor(0.6 * size)`` nodes to train and the rest to valid.
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(seed)
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    valid = np.zeros(n, dtype=bool)
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise ValueError(f"class {c} has no nodes")
        idx = rng.permutation(idx)
        if len(idx) >= train_per_class + valid_per_class:
            n_tr, n_va = train_per_class, valid_per_class
        else:
            n_tr = int(np.floor(0.6 * len(idx)))
            n_va = len(idx) - n_tr
        train[idx[:n_tr]] = True
        valid[idx[n_tr:n_tr + n_va]] = True
    test = ~(train | valid)
    return SplitAssignment(train, valid, test, seed=seed)


def induce_subgraph(graph: Graph, nodes) -> Graph:
    """Subgraph on ``nodes`` (sorted) keeping edges with both endpoints inside."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    remap = np.full(graph.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    e = remap[graph.edges] if graph.num_edges else np.zeros((0, 2), dtype=np.int64)
    e = e[(e >= 0).all(axis=1)] if len(e) else e
    origin = nodes if graph.origin is None else graph.origin[nodes]
    return Graph(len(nodes), e, graph.features[nodes], graph.labels[nodes],
                 graph.num_classes, origin=origin)


def induce_training_subgraph(graph: Graph, split: SplitAssignment) -> Graph:
    return induce_subgraph(graph, split.train_nodes)


def generate_sbm(num_blocks: int, nodes_per_block: int, p_in: float, p_out: float,
                 feature_dim: int, feature_noise: float = 1.0, seed: int = 0,
                 mean_scale: float = 1.0, label_noise: float = 0.0) -> Graph:
    """Planted-partition graph with Gaussian block features.

    Node ``i`` belongs to block ``i // nodes_per_block``. Every block draws a
    mean vector from ``N(0, mean_scale^2 I)``; node features are that mean
    plus ``N(0, feature_noise^2 I)`` noise. Labels are block ids, except that
    with ``label_noise > 0`` each node independently has that probability of
    carrying a uniformly drawn different label.
    """
    if nodes_per_block <= 0 or num_blocks <= 0:
        raise ValueError("num_blocks and nodes_per_block must be positive")
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError("label_noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = num_blocks * nodes_per_block
    labels = np.repeat(np.arange(num_blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    means = rng.normal(0.0, mean_scale, size=(num_blocks, feature_dim))
    feats = means[labels] + rng.normal(0.0, feature_noise, size=(n, feature_dim))
    if label_noise > 0 and num_blocks > 1:
        flip = rng.random(n) < label_noise
        shift = rng.integers(1, num_blocks, size=n)
        labels = np.where(flip, (labels + shift) % num_blocks, labels)
    return Graph(n, edges, feats, labels, num_blocks)


def _read_numeric_csv(path: Path, dtype, ncols: int | None) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if ncols is not None and len(parts) != ncols:
                raise GraphFormatError(f"{path.name}:{lineno}: expected {ncols} columns, got {len(parts)}")
            try:
                rows.append([dtype(p) for p in parts])
            except ValueError:
                raise GraphFormatError(f"{path.name}:{lineno}: cannot parse {line!r}") from None
    return rows


def load_graph(path) -> tuple[Graph, SplitAssignment | None]:
    """Read a graph directory (``meta.json``, ``edges.csv``, ``features.csv``,
    ``labels.csv`` and optionally ``splits.json``)."""
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        n, C, d = int(meta["num_nodes"]), int(meta["num_classes"]), int(meta["feature_dim"])
    except FileNotFoundError as exc:
        raise GraphFormatError(f"missing file: {exc.filename}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise GraphFormatError(f"meta.json: {exc}") from None

    for name in ("edges.csv", "features.csv", "labels.csv"):
        if not (path / name).exists():
            raise GraphFormatError(f"missing file: {path / name}")
    edges = _read_numeric_csv(path / "edges.csv", int, 2)
    feats = _read_numeric_csv(path / "features.csv", float, d)
    labels = _read_numeric_csv(path / "labels.csv", int, 1)
    if len(feats) != n:
        raise GraphFormatError(f"features.csv: expected {n} rows, got {len(feats)}")
    if len(labels) != n:
        raise GraphFormatError(f"labels.csv: expected {n} rows, got {len(labels)}")
    for i, (y,) in enumerate(labels):
        if not 0 <= y < C:
            raise GraphFormatError(f"labels.csv:{i + 1}: label {y} not in [0, {C})")
    graph = Graph(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                  np.asarray(feats, dtype=np.float64).reshape(n, d),
                  np.asarray(labels, dtype=np.int64).ravel(), C)

    split = None
    if (path / "splits.json").exists():
        s = json.loads((path / "splits.json").read_text())
        try:
            split = SplitAssignment.from_indices(n, s["train"], s["valid"], s["test"])
        except (KeyError, IndexError, ValueError) as exc:
            raise GraphFormatError(f"splits.json: {exc}") from None
    return graph, split


def save_graph(graph: Graph, path, split: SplitAssignment | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": graph.num_nodes, "num_classes": graph.num_classes,
            "feature_dim": graph.feature_dim}
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    with open(path / "edges.csv", "w") as fh:
        for u, v in graph.edges:
            fh.write(f"{u},{v}\n")
    with open(path / "features.csv", "w") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(path / "labels.csv", "w") as fh:
        for y in graph.labels:
            fh.write(f"{y}\n")
    if split is not None:
        (path / "splits.json").write_text(json.dumps(split.to_json()) + "\n")
