"""Edge features derived from node features and citation direction."""
from __future__ import annotations

import numpy as np

from ..exceptions import ValidationError
from ..graph import Graph

__all__ = ["endpoint_cosine", "derive_citation_edge_features", "with_citation_edge_features"]


def endpoint_cosine(X, edges):
    """Cosine similarity of the two endpoint feature rows of every edge (0 for a zero row)."""
    X = np.asarray(X, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a, b = X[edges[:, 0]], X[edges[:, 1]]
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = na * nb
    out = np.zeros(edges.shape[0])
    ok = denom > 0
    out[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / denom[ok]
    return out


def derive_citation_edge_features(g: Graph) -> np.ndarray:
    """``N_e x 3`` matrix: endpoint cosine, then ``[1, 0]`` if ``u`` cites ``v`` else ``[0, 1]``.

    Rows follow the canonical ``(u, v)`` edge order.
    """
    if g.directions is None:
        raise ValidationError("citation edge features need per-edge direction flags")
    Z = np.zeros((g.num_edges, 3))
    Z[:, 0] = endpoint_cosine(g.X, g.edges)
    Z[:, 1] = g.directions
    Z[:, 2] = ~g.directions
    return Z


def with_citation_edge_features(g: Graph) -> Graph:
    return g.with_features(Z=derive_citation_edge_features(g))
