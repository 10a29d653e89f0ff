"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np

from .exceptions import ValidationError
from .graph import Graph

__all__ = [
    "check_graph",
    "check_graphs",
    "check_fraction",
    "check_hidden",
    "check_finite",
    "ensure_edge_features",
]


def check_finite(a, name="array"):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains NaN or inf")
    return a


def check_fraction(x, name, low_open=True, high_open=True):
    """``x`` as a float inside ``(0, 1)`` (endpoints per the flags)."""
    try:
        x = float(x)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a number, got {x!r}") from None
    lo_ok = x > 0 if low_open else x >= 0
    hi_ok = x < 1 if high_open else x <= 1
    if not (lo_ok and hi_ok):
        raise ValidationError(f"{name} must lie in {'(' if low_open else '['}0, 1{')' if high_open else ']'}, got {x}")
    return x


def check_hidden(hidden):
    """Parse ``"64,32"`` / ``[64, 32]`` / ``64`` into a tuple of positive ints."""
    if isinstance(hidden, str):
        parts = [p for p in hidden.replace(" ", "").split(",") if p]
    elif np.isscalar(hidden):
        parts = [hidden]
    else:
        parts = list(hidden)
    try:
        widths = tuple(int(p) for p in parts)
    except (TypeError, ValueError):
        raise ValidationError(f"hidden widths must be integers, got {hidden!r}") from None
    if not widths or any(w <= 0 for w in widths):
        raise ValidationError(f"hidden widths must be positive, got {hidden!r}")
    return widths


def ensure_edge_features(g: Graph) -> Graph:
    """Give a graph without edge features something to gate with.

    Graphs carrying direction flags get the citation features (endpoint
    cosine plus a one-hot direction); anything else gets a constant column.
    """
    if g.edge_dim > 0:
        return g
    if g.directions is not None:
        from .data.features import derive_citation_edge_features

        return g.with_features(Z=derive_citation_edge_features(g))
    return g.with_features(Z=np.ones((g.num_edges, 1)))


def check_graph(g, require_labels=False, require_targets=False) -> Graph:
    if not isinstance(g, Graph):
        raise ValidationError(f"expected a Graph, got {type(g).__name__}")
    if g.num_nodes == 0:
        raise ValidationError("graph has no nodes")
    if require_labels and (g.labels is None or not np.any(g.labels >= 0)):
        raise ValidationError("graph has no node labels")
    if require_targets and g.targets is None:
        raise ValidationError("graph has no targets")
    if g.node_dim == 0:
        raise ValidationError("graph has no node features")
    return ensure_edge_features(g)


def check_graphs(graphs, require_targets=True):
    """Validate a non-empty list of graphs with matching feature widths."""
    if isinstance(graphs, Graph):
        graphs = [graphs]
    graphs = [check_graph(g, require_targets=require_targets) for g in graphs]
    if not graphs:
        raise ValidationError("no graphs given")
    widths = {(g.node_dim, g.edge_dim) for g in graphs}
    if len(widths) != 1:
        raise ValidationError(f"graphs disagree on feature widths: {sorted(widths)}")
    if require_targets and len({g.targets.shape[0] for g in graphs}) != 1:
        raise ValidationError("graphs disagree on target width")
    return graphs
