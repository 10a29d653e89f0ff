"""Graph data model, line-graph construction, batching and subgraph induction."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .autodiff import GateIndex, edge_gate_index, node_gate_index
from .exceptions import ShapeError, ValidationError
from .tensor import SparseMatrix, sym_normalize

__all__ = [
    "Graph",
    "LineGraphBundle",
    "GraphBatch",
    "canonical_edges",
    "build_incidence",
    "build_line_graph",
    "build_adjacency",
    "build_bundle",
    "block_diag_batch",
    "induced_subgraph",
]


def canonical_edges(edges, num_nodes):
    """Canonicalize undirected pairs to ``u < v`` and sort lexicographically.

    Returns ``(edges, order, flipped)`` where ``order`` maps each canonical
    position to its input record and ``flipped`` marks records given as
    ``(v, u)``. Self-loops and duplicates raise :class:`ValidationError`
    naming the offending record.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        bad = int(np.flatnonzero((e < 0).any(axis=1) | (e >= num_nodes).any(axis=1))[0])
        raise ValidationError(f"edge record {bad} references a node outside [0, {num_nodes})")
    loops = np.flatnonzero(e[:, 0] == e[:, 1])
    if loops.size:
        raise ValidationError(f"edge record {int(loops[0])} is a self-loop")
    flipped = e[:, 0] > e[:, 1]
    canon = np.sort(e, axis=1)
    order = np.lexsort((canon[:, 1], canon[:, 0]))
    canon = canon[order]
    if canon.shape[0] > 1:
        dup = np.flatnonzero((canon[1:] == canon[:-1]).all(axis=1))
        if dup.size:
            raise ValidationError(
                f"edge record {int(max(order[dup[0]], order[dup[0] + 1]))} duplicates an earlier edge "
                f"({int(canon[dup[0], 0])}, {int(canon[dup[0], 1])})"
            )
    return canon, order, flipped[order]


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph with node and edge features.

    ``edges`` is canonical (``u < v``, lexicographic) and ``Z`` rows follow
    that order. ``labels`` uses ``-1`` for unlabeled nodes. ``targets`` /
    ``target_mask`` hold an optional graph-level ``k``-vector with an
    explicit observed-mask. ``directions[m]`` is true when the original
    record pointed ``u -> v`` (only used to derive edge features).
    """

    num_nodes: int
    edges: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int | None = None
    targets: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    directions: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        n = int(self.num_nodes)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        X = np.asarray(self.X, dtype=np.float64)
        Z = np.asarray(self.Z, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != n:
            raise ValidationError(f"X must have {n} rows, got shape {X.shape}")
        if Z.ndim != 2 or Z.shape[0] != edges.shape[0]:
            raise ValidationError(f"Z must have one row per edge ({edges.shape[0]}), got {Z.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            raise ValidationError("features must be finite")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValidationError("edge endpoint out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValidationError("edges must be canonical (u < v) with no self-loops")
            keys = edges[:, 0] * n + edges[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise ValidationError("edges must be sorted lexicographically without duplicates")
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if labels.shape != (n,):
                raise ValidationError(f"labels must have length {n}")
            k = self.num_classes
            if k is None:
                k = int(labels.max()) + 1 if np.any(labels >= 0) else 0
                object.__setattr__(self, "num_classes", k)
            if np.any((labels < -1) | (labels >= k)):
                raise ValidationError(f"labels must lie in [0, {k}) or be -1")
            object.__setattr__(self, "labels", labels)
        if self.targets is not None:
            t = np.asarray(self.targets, dtype=np.float64).ravel()
            mask = (
                np.isfinite(t)
                if self.target_mask is None
                else np.asarray(self.target_mask, dtype=bool).ravel()
            )
            if mask.shape != t.shape:
                raise ValidationError("target_mask must match targets")
            t = np.where(mask, t, 0.0)
            object.__setattr__(self, "targets", t)
            object.__setattr__(self, "target_mask", mask)
        if self.directions is not None:
            d = np.asarray(self.directions, dtype=bool).ravel()
            if d.shape != (edges.shape[0],):
                raise ValidationError("directions must have one flag per edge")
            object.__setattr__(self, "directions", d)

    @classmethod
    def from_edge_list(cls, num_nodes, edges, X=None, Z=None, **kwargs):
        """Build from arbitrary ``(src, dst)`` records.

        Records are canonicalized and sorted; ``Z`` rows are permuted to
        match. When ``directions`` is not supplied, the record orientation
        (``src -> dst``) is kept as the direction flag. Missing ``X`` or
        ``Z`` default to a single constant column.
        """
        canon, order, flipped = canonical_edges(edges, num_nodes)
        if X is None:
            X = np.ones((num_nodes, 1))
        if Z is None:
            Z = np.ones((canon.shape[0], 1))
        else:
            Z = np.asarray(Z, dtype=np.float64).reshape(len(order), -1)[order]
        if "directions" not in kwargs:
            kwargs["directions"] = ~flipped
        elif kwargs["directions"] is not None:
            kwargs["directions"] = np.asarray(kwargs["directions"], dtype=bool)[order]
        return cls(num_nodes, canon, X, Z, **kwargs)

    @property
    def num_edges(self):
        return int(self.edges.shape[0])

    @property
    def node_dim(self):
        return int(self.X.shape[1])

    @property
    def edge_dim(self):
        return int(self.Z.shape[1])

    @property
    def degrees(self):
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def with_features(self, X=None, Z=None):
        return replace(self, X=self.X if X is None else X, Z=self.Z if Z is None else Z)

    @cached_property
    def bundle(self):
        """The graph's line-graph bundle, built on first access."""
        return build_bundle(self)

    def __repr__(self):
        return (
            f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
            f"node_dim={self.node_dim}, edge_dim={self.edge_dim})"
        )


def build_incidence(g: Graph) -> SparseMatrix:
    """``T[i, m] = 1`` iff node ``i`` is an endpoint of edge ``m``."""
    m = np.arange(g.num_edges)
    return SparseMatrix.from_coo(
        g.edges.ravel(), np.repeat(m, 2), 1.0, (g.num_nodes, g.num_edges), sum_duplicates=False
    )


def build_adjacency(g: Graph) -> SparseMatrix:
    u, v = g.edges[:, 0], g.edges[:, 1]
    return SparseMatrix.from_coo(
        np.concatenate([u, v]), np.concatenate([v, u]), 1.0, (g.num_nodes, g.num_nodes),
        sum_duplicates=False,
    )


def build_line_graph(g: Graph) -> SparseMatrix:
    """Adjacency of the line graph: edges ``m, n`` are adjacent iff they share an endpoint."""
    n_e = g.num_edges
    if n_e == 0:
        return SparseMatrix.empty(0, 0)
    node = g.edges.ravel()
    edge = np.repeat(np.arange(n_e), 2)
    order = np.argsort(node, kind="stable")
    node, edge = node[order], edge[order]
    bounds = np.flatnonzero(np.diff(node)) + 1
    rows, cols = [], []
    for group in np.split(edge, bounds):
        if group.size < 2:
            continue
        a, b = np.meshgrid(group, group, indexing="ij")
        keep = a != b
        rows.append(a[keep])
        cols.append(b[keep])
    if not rows:
        return SparseMatrix.empty(n_e, n_e)
    # in a simple graph two edges share at most one endpoint, so pairs are unique
    return SparseMatrix.from_coo(
        np.concatenate(rows), np.concatenate(cols), 1.0, (n_e, n_e), sum_duplicates=False
    )


@dataclass(frozen=True, eq=False)
class LineGraphBundle:
    """Precomputed structural constants every layer consumes."""

    T: SparseMatrix
    A_v: SparseMatrix
    A_e: SparseMatrix
    norm_Av: SparseMatrix
    norm_Ae: SparseMatrix
    edge_gate: GateIndex = field(repr=False)
    node_gate: GateIndex = field(repr=False)

    @property
    def num_nodes(self):
        return self.T.shape[0]

    @property
    def num_edges(self):
        return self.T.shape[1]


def build_bundle(g: Graph, check=False) -> LineGraphBundle:
    """Incidence, both adjacencies, both normalizations and the gate lookups.

    With ``check=True`` the identity ``A_e = T^T T - 2I`` is verified.
    """
    T = build_incidence(g)
    A_v = build_adjacency(g)
    A_e = build_line_graph(g)
    norm_Av = sym_normalize(A_v)
    norm_Ae = sym_normalize(A_e)
    if check:
        tt = (T.to_scipy().T @ T.to_scipy()).toarray() - 2.0 * np.eye(g.num_edges)
        if not np.array_equal(tt, A_e.to_dense()):
            raise ValidationError("line graph disagrees with T^T T - 2I")
    return LineGraphBundle(
        T, A_v, A_e, norm_Av, norm_Ae,
        edge_gate=edge_gate_index(T, norm_Av),
        node_gate=node_gate_index(T, norm_Ae),
    )


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several graphs merged block-diagonally.

    ``segment_ids[i]`` is the source graph of merged node ``i``;
    ``targets``/``target_mask`` stack the per-graph target vectors.
    """

    graph: Graph
    segment_ids: np.ndarray
    node_offsets: np.ndarray
    edge_offsets: np.ndarray
    targets: np.ndarray | None = None
    target_mask: np.ndarray | None = None

    @property
    def num_graphs(self):
        return len(self.node_offsets) - 1


def block_diag_batch(graphs) -> GraphBatch:
    """Merge graphs into one graph whose adjacency is block diagonal."""
    graphs = list(graphs)
    if not graphs:
        raise ValidationError("cannot batch an empty list of graphs")
    d_v, d_e = graphs[0].node_dim, graphs[0].edge_dim
    for i, g in enumerate(graphs):
        if g.node_dim != d_v or g.edge_dim != d_e:
            raise ShapeError(
                f"graph {i} has feature widths ({g.node_dim}, {g.edge_dim}), expected ({d_v}, {d_e})"
            )
    n_off = np.concatenate([[0], np.cumsum([g.num_nodes for g in graphs])])
    e_off = np.concatenate([[0], np.cumsum([g.num_edges for g in graphs])])
    edges = np.vstack([g.edges + n_off[i] for i, g in enumerate(graphs)])
    X = np.vstack([g.X for g in graphs])
    Z = np.vstack([g.Z for g in graphs])
    seg = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])

    labels, num_classes = None, None
    if all(g.labels is not None for g in graphs):
        labels = np.concatenate([g.labels for g in graphs])
        num_classes = max(g.num_classes for g in graphs)
    directions = None
    if all(g.directions is not None for g in graphs):
        directions = np.concatenate([g.directions for g in graphs])

    targets = mask = None
    with_t = [g.targets is not None for g in graphs]
    if any(with_t):
        if not all(with_t):
            raise ValidationError("either every graph in a batch has targets or none does")
        widths = {g.targets.shape[0] for g in graphs}
        if len(widths) != 1:
            raise ShapeError(f"inconsistent target widths {sorted(widths)}")
        targets = np.vstack([g.targets for g in graphs])
        mask = np.vstack([g.target_mask for g in graphs])

    merged = Graph(
        int(n_off[-1]), edges, X, Z, labels=labels, num_classes=num_classes, directions=directions
    )
    return GraphBatch(merged, seg, n_off, e_off, targets, mask)


def induced_subgraph(g: Graph, nodes):
    """Keep the given nodes and exactly the edges with both endpoints kept.

    Returns ``(subgraph, node_map, edge_ids)``: ``node_map[old]`` is the new
    index or ``-1``; ``edge_ids[new]`` is the original edge index.
    """
    nodes = np.unique(np.asarray(nodes, dtype=np.int64).ravel())
    if nodes.size and (nodes[0] < 0 or nodes[-1] >= g.num_nodes):
        raise ValidationError(f"node id out of range [0, {g.num_nodes})")
    node_map = np.full(g.num_nodes, -1, dtype=np.int64)
    node_map[nodes] = np.arange(nodes.size)
    mapped = node_map[g.edges]
    edge_ids = np.flatnonzero((mapped >= 0).all(axis=1))
    # the relabeling is monotone, so canonical order is preserved
    sub = Graph(
        int(nodes.size),
        mapped[edge_ids],
        g.X[nodes],
        g.Z[edge_ids],
        labels=None if g.labels is None else g.labels[nodes],
        num_classes=g.num_classes,
        targets=g.targets,
        target_mask=g.target_mask,
        directions=None if g.directions is None else g.directions[edge_ids],
        name=g.name,
    )
    return sub, node_map, edge_ids
