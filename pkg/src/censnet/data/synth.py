"""Planted-model generators with known ground truth."""
from __future__ import annotations

import numpy as np

from ..exceptions import ContractError
from ..graph import Graph
from .features import endpoint_cosine

__all__ = [
    "planted_partition_graph",
    "planted_rule_molecules",
    "planted_pooled_regression",
    "planted_lowrank_graph",
    "GENERATORS",
]


def _balanced_counts(n, balance):
    balance = np.asarray(balance, dtype=np.float64)
    if np.any(balance <= 0) or not np.isclose(balance.sum(), 1.0):
        raise ContractError("class balance must be positive and sum to 1")
    counts = np.floor(balance * n).astype(int)
    # hand out the remainder to the largest fractional parts
    rem = n - counts.sum()
    counts[np.argsort(-(balance * n - counts), kind="stable")[:rem]] += 1
    return counts


def planted_partition_graph(n_nodes=200, communities=2, homophily=0.9, avg_degree=6.0,
                            feature_dim=16, feature_signal=1.0, balance=None, seed=0):
    """Community graph whose node features are noisy community prototypes.

    A fraction ``homophily`` of edges joins nodes of the same community.
    Edge features are ``[cosine(x_u, x_v), gaussian noise]``; directions are
    random. Labels are community ids.
    """
    if not 0.0 <= homophily <= 1.0:
        raise ContractError("homophily must be in [0, 1]")
    if communities < 1 or n_nodes < 2 * communities:
        raise ContractError("need at least two nodes per community")
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n_nodes, balance if balance is not None else [1.0 / communities] * communities)
    labels = rng.permutation(np.repeat(np.arange(communities), counts))
    members = [np.flatnonzero(labels == c) for c in range(communities)]

    target = int(round(avg_degree * n_nodes / 2))
    max_edges = n_nodes * (n_nodes - 1) // 2
    if target > max_edges // 2:
        raise ContractError("avg_degree too high for this many nodes")
    edges = set()
    attempts = 0
    while len(edges) < target:
        attempts += 1
        if attempts > 50 * target:
            raise ContractError("could not place the requested number of edges")
        u = int(rng.integers(n_nodes))
        cu = labels[u]
        if communities == 1 or rng.random() < homophily:
            v = int(rng.choice(members[cu]))
        else:
            other = rng.choice([c for c in range(communities) if c != cu])
            v = int(rng.choice(members[other]))
        if u != v:
            edges.add((min(u, v), max(u, v)))
    edges = np.array(sorted(edges), dtype=np.int64)

    prototypes = rng.standard_normal((communities, feature_dim))
    X = feature_signal * prototypes[labels] + rng.standard_normal((n_nodes, feature_dim))
    Z = np.column_stack([endpoint_cosine(X, edges), rng.standard_normal(len(edges))])
    directions = rng.random(len(edges)) < 0.5
    return Graph(n_nodes, edges, X, Z, labels=labels, num_classes=communities, directions=directions,
                 name="planted-partition")


def _has_rule_triangle(edges, z, tau):
    """Brute-force check: a triangle whose edge values sum above ``tau``."""
    val = {(int(u), int(v)): float(w) for (u, v), w in zip(edges, z)}
    nodes = sorted({int(x) for e in edges for x in e})
    for a in nodes:
        for b in nodes:
            if b <= a or (a, b) not in val:
                continue
            for c in nodes:
                if c <= b or (a, c) not in val or (b, c) not in val:
                    continue
                if val[(a, b)] + val[(a, c)] + val[(b, c)] > tau:
                    return True
    return False


def planted_rule_molecules(q=300, tau=1.5, min_nodes=6, max_nodes=12, triangle_prob=0.6,
                           background_max=0.3, missing_rate=0.0, seed=0):
    """Small random graphs labeled by a planted structural rule.

    Each graph is a random tree, optionally closed into a triangle at a
    random node. Edge feature 0 is ``U(0, background_max)`` on tree edges
    and ``U(0, 1)`` on triangle edges; feature 1 is a constant. The first
    target is ``1`` iff some triangle's feature-0 sum exceeds ``tau``
    (checked by brute force); the second is ``1`` iff any triangle exists.
    Node features are ``[1, degree / 4]``. ``missing_rate`` hides target
    cells at random (never all of a graph's cells).
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(q):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        parents = [int(rng.integers(i)) for i in range(1, n)]
        edges = {(p, i): float(rng.uniform(0, background_max)) for i, p in zip(range(1, n), parents)}
        if rng.random() < triangle_prob:
            # close a triangle through a node with two tree neighbours, or add a fresh chord
            centre = int(rng.integers(n))
            nbrs = [v for (u, v) in edges if u == centre] + [u for (u, v) in edges if v == centre]
            if len(nbrs) >= 2:
                a, b = rng.choice(nbrs, size=2, replace=False)
            else:
                a = nbrs[0]
                b = int(rng.choice([x for x in range(n) if x not in (centre, a)]))
                edges[(min(centre, int(b)), max(centre, int(b)))] = 0.0
            a, b = int(a), int(b)
            edges[(min(a, b), max(a, b))] = 0.0
            for key in [(min(centre, a), max(centre, a)), (min(centre, b), max(centre, b)), (min(a, b), max(a, b))]:
                edges[key] = float(rng.uniform(0, 1))
        pairs = np.array(sorted(edges), dtype=np.int64)
        z0 = np.array([edges[tuple(p)] for p in pairs])
        Z = np.column_stack([z0, np.ones(len(pairs))])
        deg = np.bincount(pairs.ravel(), minlength=n)
        X = np.column_stack([np.ones(n), deg / 4.0])
        y_rule = float(_has_rule_triangle(pairs, z0, tau))
        y_tri = float(_has_rule_triangle(pairs, z0, -np.inf))
        targets = np.array([y_rule, y_tri])
        mask = rng.random(2) >= missing_rate
        if not mask.any():
            mask[int(rng.integers(2))] = True
        graphs.append(Graph(n, pairs, X, Z, targets=targets, target_mask=mask, name="planted-rule"))
    return graphs


def planted_pooled_regression(q=300, feature_dim=4, min_nodes=4, max_nodes=10, noise=0.0, seed=0):
    """Randomly labeled cycles whose scalar target is a fixed linear function
    of the mean-pooled node features.

    ``y = <w, mean_i x_i> + noise * N(0, 1)`` with ``w ~ N(0, I)`` drawn once.
    Cycles are degree-regular, so normalized propagation preserves the
    feature mean and the target is exactly expressible by a linear stack.
    Node features are ``[x_i, 1]``; edge features are a single constant column.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(feature_dim)
    graphs = []
    for _ in range(q):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        ring = rng.permutation(n)
        pairs = np.sort(np.column_stack([ring, np.roll(ring, -1)]), axis=1)
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        F = rng.standard_normal((n, feature_dim))
        y = float(F.mean(axis=0) @ w + noise * rng.standard_normal())
        # constant channel: there are no bias terms, so gates need something fixed to hold on to
        X = np.column_stack([F, np.ones(n)])
        graphs.append(Graph(n, pairs, X, np.ones((n, 1)), targets=np.array([y]), name="planted-pooled"))
    return graphs


def planted_lowrank_graph(n_nodes=250, rank=4, scale=2.0, bias=-8.0, feature_noise=0.1, seed=0):
    """Edges drawn independently with ``P(i ~ j) = sigmoid(<f_i, f_j> + bias)``.

    Node features are the latent factors plus noise, so the generating
    geometry is recoverable. Returns ``(graph, probabilities)``.
    """
    rng = np.random.default_rng(seed)
    F = scale * rng.standard_normal((n_nodes, rank))
    logits = F @ F.T + bias
    P = 1.0 / (1.0 + np.exp(-logits))
    iu, ju = np.triu_indices(n_nodes, k=1)
    keep = rng.random(iu.size) < P[iu, ju]
    edges = np.column_stack([iu[keep], ju[keep]]).astype(np.int64)
    X = np.column_stack([F + feature_noise * rng.standard_normal(F.shape), np.ones(n_nodes)])
    Z = np.column_stack([endpoint_cosine(X, edges), np.ones(len(edges))])
    directions = rng.random(len(edges)) < 0.5
    g = Graph(n_nodes, edges, X, Z, directions=directions, name="planted-lowrank")
    return g, P


GENERATORS = {
    "planted-partition": planted_partition_graph,
    "planted-rule": planted_rule_molecules,
    "planted-pooled": planted_pooled_regression,
    "planted-lowrank": planted_lowrank_graph,
}
