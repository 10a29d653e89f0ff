"""scikit-learn style wrappers around the training loops.

Node-level estimators are transductive: ``fit`` takes a :class:`Graph` and
``predict`` defaults to the fitted graph. Graph-level estimators take a
list of graphs. All accept ``get_params`` / ``set_params`` and can be
saved to and restored from a JSON checkpoint.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.exceptions import NotFittedError

from .data.splits import LinkSplit, NodeSplit, link_split
from .exceptions import ValidationError
from .layers import CensNet, VAEParams
from .metrics import accuracy, average_precision, multitask_auc, rmse, roc_auc
from .training import (
    TrainConfig,
    encode_mean,
    graph_predictions,
    link_logits,
    link_scores,
    load_checkpoint,
    save_checkpoint,
    train_graph_level,
    train_link_prediction,
    train_node_classification,
)
from .validation import check_fraction, check_graph, check_graphs, check_hidden

__all__ = [
    "CensNetClassifier",
    "CensNetGraphClassifier",
    "CensNetGraphRegressor",
    "CensNetLinkPredictor",
    "model_from_checkpoint",
]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _model_record(model: CensNet):
    return {
        "kind": "censnet",
        "node_dim": model.node_dim,
        "edge_dim": model.edge_dim,
        "layers": [list(x) for x in model.layer_spec],
        "activation": model.activation,
        "output_activation": model.output_activation,
    }


def _vae_record(params: VAEParams):
    return {
        "kind": "vae",
        "node_dim": params.W_v.shape[0],
        "edge_dim": params.W_e.shape[0],
        "hidden": params.W_v.shape[1],
        "latent": params.W_mu.shape[1],
        "edge_hidden": params.W_e.shape[1],
    }


def model_from_checkpoint(config: TrainConfig, weights, extra):
    """Rebuild a :class:`CensNet` or :class:`VAEParams` from a checkpoint record."""
    arch = extra.get("model")
    if not arch:
        raise ValidationError("checkpoint carries no model description")
    rng = np.random.default_rng(0)
    if arch["kind"] == "vae":
        params = VAEParams.init(arch["node_dim"], arch["edge_dim"], rng, arch["hidden"],
                                arch["latent"], arch["edge_hidden"])
        params.set_weights(weights)
        return params
    model = CensNet(arch["node_dim"], arch["edge_dim"], [tuple(x) for x in arch["layers"]], rng,
                    activation=arch["activation"], output_activation=arch["output_activation"],
                    dropout=config.dropout, add_identity=config.gate_self_loop)
    model.set_weights(weights)
    return model


class _Base(BaseEstimator):
    _task = "node-cls"

    def _config(self):
        params = self.get_params()
        params["hidden"] = check_hidden(params["hidden"])
        params.pop("val_fraction", None)
        return TrainConfig.defaults_for(self._task, **params)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def save(self, path):
        self._check_fitted()
        weights = self.model_.get_weights()
        names = [p.name for p in self.model_.parameters()]
        rec = _vae_record(self.model_) if isinstance(self.model_, VAEParams) else _model_record(self.model_)
        return save_checkpoint(path, weights, names, self._config(), {"model": rec, **self._extra()})

    def _extra(self):
        return {}

    @classmethod
    def load(cls, path):
        config, weights, _, extra = load_checkpoint(path)
        if config.task != cls._task:
            raise ValidationError(f"checkpoint is for task {config.task!r}, not {cls._task!r}")
        names = set(cls().get_params())
        kw = {k: v for k, v in config.to_dict().items() if k in names}
        if isinstance(kw.get("hidden"), list):
            kw["hidden"] = tuple(kw["hidden"])
        est = cls(**kw)
        est.model_ = model_from_checkpoint(config, weights, extra)
        est._restore(extra)
        return est

    def _restore(self, extra):
        pass


class CensNetClassifier(ClassifierMixin, _Base):
    """Semi-supervised node classifier.

    ``fit(g)`` trains on the labeled nodes of ``g`` (or on ``train_mask``),
    holding out ``val_fraction`` of them for early stopping unless
    ``val_mask`` is given.
    """

    _task = "node-cls"

    def __init__(self, hidden=(32, 32), activation="relu", dropout=0.5, gate_self_loop=False,
                 lr=0.01, l2=5e-4, epochs=1000, patience=50, batch_count=1, val_fraction=0.2, seed=0):
        self.hidden = hidden
        self.activation = activation
        self.dropout = dropout
        self.gate_self_loop = gate_self_loop
        self.lr = lr
        self.l2 = l2
        self.epochs = epochs
        self.patience = patience
        self.batch_count = batch_count
        self.val_fraction = val_fraction
        self.seed = seed

    def _split(self, g, train_mask, val_mask, test_mask):
        labeled = g.labels >= 0
        n = g.num_nodes
        if train_mask is None:
            train_mask = labeled.copy()
        train_mask = np.asarray(train_mask, dtype=bool) & labeled
        if val_mask is None:
            frac = check_fraction(self.val_fraction, "val_fraction")
            ids = np.flatnonzero(train_mask)
            if ids.size < 2:
                raise ValidationError("need at least two labeled nodes to hold one out for validation")
            rng = np.random.default_rng(self.seed)
            k = min(max(1, int(round(frac * ids.size))), ids.size - 1)
            val_ids = rng.choice(ids, size=k, replace=False)
            val_mask = np.zeros(n, dtype=bool)
            val_mask[val_ids] = True
            train_mask = train_mask & ~val_mask
        val_mask = np.asarray(val_mask, dtype=bool)
        test_mask = np.zeros(n, dtype=bool) if test_mask is None else np.asarray(test_mask, dtype=bool)
        return NodeSplit(train_mask, val_mask, test_mask)

    def fit(self, g, y=None, train_mask=None, val_mask=None, test_mask=None):
        g = check_graph(g)
        if y is not None:
            y = np.asarray(y, dtype=np.int64).ravel()
            if y.shape != (g.num_nodes,):
                raise ValidationError(f"y needs one entry per node ({g.num_nodes})")
            g = type(g)(g.num_nodes, g.edges, g.X, g.Z, labels=y, directions=g.directions, name=g.name)
        check_graph(g, require_labels=True)
        split = self._split(g, train_mask, val_mask, test_mask)
        self.report_, self.model_ = train_node_classification(g, split, self._config())
        self.graph_ = g
        self.split_ = split
        self.classes_ = np.arange(g.num_classes)
        return self

    def _graph(self, g):
        self._check_fitted()
        if g is None:
            if not hasattr(self, "graph_"):
                raise ValidationError("no graph given and none stored with the model")
            return self.graph_
        g = check_graph(g)
        if g.node_dim != self.model_.node_dim or g.edge_dim != self.model_.edge_dim:
            raise ValidationError(
                f"feature widths ({g.node_dim}, {g.edge_dim}) differ from the fitted "
                f"({self.model_.node_dim}, {self.model_.edge_dim})"
            )
        return g

    def decision_function(self, g=None):
        g = self._graph(g)
        H_v, _ = self.model_.forward(g.X, g.Z, g.bundle, train=False)
        return H_v.value

    def predict_proba(self, g=None):
        return _softmax(self.decision_function(g))

    def predict(self, g=None):
        return self.decision_function(g).argmax(axis=1)

    def transform(self, g=None):
        """Node embeddings from the last hidden node layer."""
        g = self._graph(g)
        kinds = [k for k, _ in self.model_.layer_spec]
        last_node = max(i for i, k in enumerate(kinds[:-1]) if k == "node") if "node" in kinds[:-1] else -1
        H_v, _ = self.model_.forward(g.X, g.Z, g.bundle, train=False, num_layers=last_node + 1)
        return H_v.value

    def score(self, g=None, y=None, mask=None):
        g = self._graph(g)
        y = g.labels if y is None else np.asarray(y)
        m = (y >= 0) if mask is None else np.asarray(mask, dtype=bool) & (y >= 0)
        return accuracy(self.predict(g), y, m)

    def _restore(self, extra):
        self.classes_ = np.arange(self.model_.out_node_dim)


class _GraphLevel(_Base):
    def __init__(self, hidden=(32, 32), activation="relu", dropout=0.0, gate_self_loop=False,
                 lr=0.01, l2=0.0, epochs=200, patience=50, batch_size=32, val_fraction=0.15,
                 reg_lambda=5e-4, reg_p=2, seed=0):
        self.hidden = hidden
        self.activation = activation
        self.dropout = dropout
        self.gate_self_loop = gate_self_loop
        self.lr = lr
        self.l2 = l2
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.reg_lambda = reg_lambda
        self.reg_p = reg_p
        self.seed = seed

    def _with_targets(self, graphs, y, mask):
        if y is None:
            return check_graphs(graphs)
        graphs = check_graphs(graphs, require_targets=False)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != len(graphs):
            raise ValidationError(f"y has {y.shape[0]} rows for {len(graphs)} graphs")
        mask = np.isfinite(y) if mask is None else np.asarray(mask, dtype=bool).reshape(y.shape)
        return [
            type(g)(g.num_nodes, g.edges, g.X, g.Z, labels=g.labels, num_classes=g.num_classes,
                    targets=np.where(m, t, 0.0), target_mask=m, directions=g.directions, name=g.name)
            for g, t, m in zip(graphs, y, mask)
        ]

    def fit(self, graphs, y=None, mask=None, splits=None):
        graphs = self._with_targets(graphs, y, mask)
        q = len(graphs)
        if splits is None:
            frac = check_fraction(self.val_fraction, "val_fraction")
            rng = np.random.default_rng(self.seed)
            perm = rng.permutation(q)
            k = min(max(1, int(round(frac * q))), q - 1)
            splits = (np.sort(perm[k:]), np.sort(perm[:k]), np.array([], dtype=np.int64))
        self.report_, self.model_ = train_graph_level(graphs, splits, self._config(), task=self._task)
        self.n_targets_ = graphs[0].targets.shape[0]
        return self

    def decision_function(self, graphs):
        self._check_fitted()
        graphs = check_graphs(graphs, require_targets=False)
        return graph_predictions(self.model_, graphs)

    def transform(self, graphs):
        """Mean-pooled node embeddings from the last hidden node layer."""
        from . import autodiff as ad
        from .graph import block_diag_batch

        self._check_fitted()
        graphs = check_graphs(graphs, require_targets=False)
        kinds = [k for k, _ in self.model_.layer_spec]
        nodes = [i for i, k in enumerate(kinds[:-1]) if k == "node"]
        upto = nodes[-1] + 1 if nodes else 0
        batch = block_diag_batch(graphs)
        H_v, _ = self.model_.forward(batch.graph.X, batch.graph.Z, batch.graph.bundle, num_layers=upto)
        return ad.mean_pool_rows(H_v, batch.segment_ids, batch.num_graphs).value

    def _restore(self, extra):
        self.n_targets_ = self.model_.out_node_dim


class CensNetGraphClassifier(ClassifierMixin, _GraphLevel):
    """Multi-task binary graph classifier; missing targets are skipped."""

    _task = "graph-cls"

    def predict_proba(self, graphs):
        return _sigmoid(self.decision_function(graphs))

    def predict(self, graphs):
        return (self.decision_function(graphs) > 0).astype(np.int64)

    def score(self, graphs, y=None, mask=None):
        graphs = self._with_targets(graphs, y, mask)
        T = np.vstack([g.targets for g in graphs])
        M = np.vstack([g.target_mask for g in graphs])
        return multitask_auc(self.decision_function(graphs), T, M)


class CensNetGraphRegressor(RegressorMixin, _GraphLevel):
    """Graph regressor trained with the regularized squared error."""

    _task = "graph-reg"

    def predict(self, graphs):
        out = self.decision_function(graphs)
        return out[:, 0] if out.shape[1] == 1 else out

    def score(self, graphs, y=None, mask=None):
        """Negative RMSE over observed targets (higher is better)."""
        graphs = self._with_targets(graphs, y, mask)
        T = np.vstack([g.targets for g in graphs])
        M = np.vstack([g.target_mask for g in graphs])
        return -rmse(self.decision_function(graphs), T, M)


class CensNetLinkPredictor(_Base):
    """Variational graph autoencoder with a CensNet encoder.

    ``fit(g)`` trains on every edge of ``g`` unless ``holdout`` is set, in
    which case a validation/test link split is drawn first.
    """

    _task = "link-pred"

    def __init__(self, hidden=64, latent=32, edge_hidden=32, gate_self_loop=False, lr=0.01,
                 epochs=400, holdout=False, seed=0):
        self.hidden = hidden
        self.latent = latent
        self.edge_hidden = edge_hidden
        self.gate_self_loop = gate_self_loop
        self.lr = lr
        self.epochs = epochs
        self.holdout = holdout
        self.seed = seed

    def _config(self):
        params = self.get_params()
        params.pop("holdout")
        params["hidden"] = check_hidden(params["hidden"])[:1]
        return TrainConfig.defaults_for("link-pred", **params)

    def fit(self, g, y=None, split: LinkSplit | None = None):
        g = check_graph(g)
        if split is None:
            split = link_split(g, self.seed) if self.holdout else link_split(g, self.seed, 0.0, 0.0)
        self.report_, self.model_, self.embedding_, self.split_ = train_link_prediction(g, self._config(), split)
        self.graph_ = split.train_graph
        return self

    def transform(self, g=None):
        """Encoder means, one row per node."""
        self._check_fitted()
        if g is None:
            if hasattr(self, "embedding_"):
                return self.embedding_
            raise ValidationError("no graph given and none stored with the model")
        g = check_graph(g)
        return encode_mean(self.model_, g, self.gate_self_loop)

    def _emb(self, g):
        return self.transform(g)

    def _extra(self):
        return {"embedding": np.asarray(self.embedding_).tolist()}

    def _restore(self, extra):
        if extra.get("embedding") is not None:
            self.embedding_ = np.asarray(extra["embedding"], dtype=np.float64)

    def decision_function(self, pairs, g=None):
        return link_logits(self._emb(g), pairs)

    def predict_proba(self, pairs, g=None):
        return link_scores(self._emb(g), pairs)

    def predict(self, pairs, g=None):
        return (self.decision_function(pairs, g) > 0).astype(np.int64)

    def score(self, pairs, labels, g=None):
        """ROC AUC of the pair scores."""
        return roc_auc(self.decision_function(pairs, g), labels)

    def average_precision(self, pairs, labels, g=None):
        return average_precision(self.decision_function(pairs, g), labels)
