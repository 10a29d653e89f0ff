"""Split generators: few-shot node splits, link splits, graph-level splits.

Every split is a pure function of the graph content and the seed.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..exceptions import ContractError, ValidationError
from ..graph import Graph
from .io import graph_fingerprint

__all__ = ["NodeSplit", "LinkSplit", "split_rng", "few_shot_split", "link_split", "graph_split", "round_half_up"]


def round_half_up(x):
    return int(math.floor(x + 0.5))


def split_rng(g: Graph | None, seed: int):
    """Generator keyed on (graph content, seed)."""
    words = [int(seed) & 0xFFFFFFFF]
    if g is not None:
        fp = graph_fingerprint(g)
        words += [int(fp[i : i + 8], 16) for i in range(0, 32, 8)]
    return np.random.default_rng(words)


@dataclass(frozen=True)
class NodeSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sizes(self):
        return int(self.train.sum()), int(self.val.sum()), int(self.test.sum())

    def as_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def few_shot_split(g: Graph, label_rate: float, seed: int) -> NodeSplit:
    """``ceil(rate * N)`` training nodes; the rest split 50/50 into validation/test.

    Only labeled nodes take part. One node per class is drawn first (as
    long as the budget allows), the remainder uniformly. A class missing
    from the training set triggers a warning.
    """
    if g.labels is None:
        raise ValidationError("few_shot_split needs node labels")
    if not 0.0 < label_rate < 1.0:
        raise ContractError(f"label_rate must be in (0, 1), got {label_rate}")
    pool = np.flatnonzero(g.labels >= 0)
    n_train = math.ceil(label_rate * pool.size - 1e-9)
    if n_train >= pool.size - 1:
        raise ContractError("label rate leaves no nodes for validation and testing")
    rng = split_rng(g, seed)
    labels = g.labels[pool]
    chosen = []
    for c in rng.permutation(np.unique(labels)):
        if len(chosen) == n_train:
            break
        chosen.append(int(rng.choice(pool[labels == c])))
    rest = np.setdiff1d(pool, chosen)
    extra = rng.choice(rest, size=n_train - len(chosen), replace=False)
    train_ids = np.concatenate([np.asarray(chosen, dtype=np.int64), extra])
    missing = set(np.unique(labels)) - set(g.labels[train_ids])
    if missing:
        warnings.warn(f"classes {sorted(int(c) for c in missing)} have no training node", stacklevel=2)
    remaining = rng.permutation(np.setdiff1d(pool, train_ids))
    n_val = remaining.size // 2
    masks = [np.zeros(g.num_nodes, dtype=bool) for _ in range(3)]
    masks[0][train_ids] = True
    masks[1][remaining[:n_val]] = True
    masks[2][remaining[n_val:]] = True
    return NodeSplit(*masks)


@dataclass(frozen=True)
class LinkSplit:
    """Training graph plus held-out positive/negative node pairs."""

    train_graph: Graph
    train_edge_ids: np.ndarray
    val_pos: np.ndarray
    val_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray

    def pairs(self, split):
        pos, neg = (self.val_pos, self.val_neg) if split == "val" else (self.test_pos, self.test_neg)
        pairs = np.vstack([pos, neg])
        labels = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        return pairs, labels


def _sample_non_edges(n, forbidden, count, rng):
    """``count`` distinct unordered pairs (i < j) whose keys are not in ``forbidden``."""
    total = n * (n - 1) // 2
    if total - len(forbidden) < count:
        raise ContractError(
            f"cannot sample {count} negative pairs: only {total - len(forbidden)} non-edges exist"
        )
    found = []
    taken = set(forbidden)
    if total - len(taken) < 4 * count:
        # near-complete graph: enumerate the complement
        iu, ju = np.triu_indices(n, k=1)
        keys = iu * n + ju
        free = keys[~np.isin(keys, np.fromiter(taken, dtype=np.int64, count=len(taken)))]
        pick = rng.choice(free, size=count, replace=False)
        return np.stack([pick // n, pick % n], axis=1)
    while len(found) < count:
        i = rng.integers(0, n, size=2 * (count - len(found)))
        j = rng.integers(0, n, size=i.size)
        for a, b in zip(i, j):
            if a == b:
                continue
            a, b = (a, b) if a < b else (b, a)
            key = int(a) * n + int(b)
            if key in taken:
                continue
            taken.add(key)
            found.append((a, b))
            if len(found) == count:
                break
    return np.asarray(found, dtype=np.int64).reshape(-1, 2)


def link_split(g: Graph, seed: int, val_frac=0.05, test_frac=0.10) -> LinkSplit:
    """Hold out ``test_frac`` / ``val_frac`` of the edges with as many non-edges each.

    The training graph keeps the remaining edges with their feature rows.
    Negatives are uniform over non-adjacent pairs and disjoint across
    validation and test.
    """
    n_e = g.num_edges
    n_test, n_val = round_half_up(test_frac * n_e), round_half_up(val_frac * n_e)
    if n_test + n_val >= n_e:
        raise ContractError("graph has too few edges for a link split")
    rng = split_rng(g, seed)
    perm = rng.permutation(n_e)
    test_ids, val_ids = np.sort(perm[:n_test]), np.sort(perm[n_test : n_test + n_val])
    train_ids = np.sort(perm[n_test + n_val :])
    n = g.num_nodes
    edge_keys = set((g.edges[:, 0] * n + g.edges[:, 1]).tolist())
    neg = _sample_non_edges(n, edge_keys, n_test + n_val, rng)
    train_graph = Graph(
        n, g.edges[train_ids], g.X, g.Z[train_ids],
        labels=g.labels, num_classes=g.num_classes,
        directions=None if g.directions is None else g.directions[train_ids],
        name=g.name,
    )
    return LinkSplit(
        train_graph, train_ids,
        val_pos=g.edges[val_ids], val_neg=neg[n_test:],
        test_pos=g.edges[test_ids], test_neg=neg[:n_test],
    )


def graph_split(num_graphs: int, train_frac: float, seed: int):
    """Index arrays ``(train, val, test)``; the remainder is split equally."""
    if not 0.0 < train_frac < 1.0:
        raise ContractError(f"train_frac must be in (0, 1), got {train_frac}")
    rng = np.random.default_rng(int(seed))
    perm = rng.permutation(num_graphs)
    n_train = round_half_up(train_frac * num_graphs)
    n_val = (num_graphs - n_train) // 2
    if n_train == 0 or n_val == 0 or num_graphs - n_train - n_val == 0:
        raise ContractError("split leaves an empty partition")
    return (np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val]),
            np.sort(perm[n_train + n_val :]))
