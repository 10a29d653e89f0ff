"""Training loops for the four tasks, mini-batch partitioning and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data.splits import LinkSplit, NodeSplit, link_split
from .exceptions import ContractError, DataFormatError, NumericalError, ValidationError
from .graph import Graph, block_diag_batch, build_bundle, induced_subgraph
from .layers import CensNet, VAEParams, reparameterize, vae_decode_logits, vae_encode
from .losses import elbo_loss, masked_cross_entropy, multitask_cross_entropy, reconstruction_weights, regularized_mse
from .metrics import accuracy, average_precision, multitask_auc, rmse, roc_auc
from .optim import Adam

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "layer_plan",
    "minibatch_partition",
    "train_node_classification",
    "train_graph_level",
    "train_link_prediction",
    "link_scores",
    "link_logits",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class TrainConfig:
    """Hyperparameters shared by all training loops.

    ``hidden`` lists hidden widths; layers alternate node/edge starting with
    a node layer and a final node layer produces the task output. For link
    prediction ``hidden[0]`` is the encoder width.
    """

    task: str = "node-cls"
    hidden: tuple = (32, 32)
    activation: str = "relu"
    dropout: float = 0.5
    gate_self_loop: bool = False
    lr: float = 0.01
    weight_decay: float = 0.0
    l2: float = 5e-4
    epochs: int = 1000
    patience: int = 50
    seed: int = 0
    batch_count: int = 1
    batch_size: int = 32
    latent: int = 32
    edge_hidden: int = 32
    reg_lambda: float = 5e-4
    reg_p: int = 2
    reg_reduction: str = "sum"
    eval_every: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h <= 0 for h in self.hidden):
            raise ValidationError("hidden widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.lr <= 0 or self.epochs < 1 or self.batch_count < 1 or self.batch_size < 1:
            raise ValidationError("lr, epochs, batch_count and batch_size must be positive")
        if self.reg_p not in (1, 2):
            raise ValidationError("reg_p must be 1 or 2")

    @classmethod
    def defaults_for(cls, task, **overrides):
        base = {
            "node-cls": dict(hidden=(32, 32), dropout=0.5, epochs=1000, patience=50),
            "graph-cls": dict(hidden=(32, 32), dropout=0.0, epochs=200, patience=50, l2=0.0),
            "graph-reg": dict(hidden=(32, 32), dropout=0.0, epochs=200, patience=50, l2=0.0),
            "link-pred": dict(hidden=(64,), latent=32, dropout=0.0, lr=0.01, epochs=400, l2=0.0),
        }
        if task not in base:
            raise ValidationError(f"unknown task {task!r}")
        kw = dict(base[task])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(task=task, **kw)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def layer_plan(hidden, out_width):
    kinds = ["node" if i % 2 == 0 else "edge" for i in range(len(hidden))]
    return list(zip(kinds, hidden)) + [("node", int(out_width))]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_metric: float | None
    val_metric: float | None
    test_metric: float | None
    wall_time: float


@dataclass
class TrainReport:
    task: str
    metric: str
    higher_is_better: bool
    history: list = field(default_factory=list)
    best_epoch: int = -1
    final: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, rec: EpochRecord):
        if self.history and rec.epoch <= self.history[-1].epoch:
            raise ContractError("epochs must be recorded in increasing order")
        self.history.append(rec)

    @property
    def losses(self):
        return [r.train_loss for r in self.history]

    def to_dict(self, timing=True):
        history = [asdict(r) for r in self.history]
        if not timing:
            for h in history:
                h.pop("wall_time")
        return {
            "schema_version": CHECKPOINT_VERSION,
            "task": self.task,
            "metric": self.metric,
            "higher_is_better": self.higher_is_better,
            "best_epoch": self.best_epoch,
            "final": self.final,
            "config": self.config,
            "history": history,
        }

    def curve_csv(self):
        lines = ["epoch,train_loss,val_metric"]
        for r in self.history:
            val = "" if r.val_metric is None else repr(r.val_metric)
            lines.append(f"{r.epoch},{r.train_loss!r},{val}")
        return "\n".join(lines) + "\n"


def _check_loss(value, epoch):
    if not np.isfinite(value):
        raise NumericalError(f"training loss became {value} at epoch {epoch}")
    return value


def _better(a, b, higher):
    if b is None:
        return True
    return a > b if higher else a < b


# -- mini-batching ---------------------------------------------------------------

@dataclass
class NodeBatch:
    graph: Graph
    node_ids: np.ndarray
    train: np.ndarray


def minibatch_partition(g: Graph, split: NodeSplit, batch_count: int, rng):
    """Partition the nodes into induced subgraphs, each drawing from train/val/test
    (and any remaining unlabeled nodes) in proportion to their global sizes.

    Edges that cross batches are dropped. Validation/test nodes only act as
    unlabeled context. Returns a list of :class:`NodeBatch`.
    """
    if batch_count < 1:
        raise ContractError("batch_count must be >= 1")
    if batch_count == 1:
        return [NodeBatch(g, np.arange(g.num_nodes), split.train.copy())]
    other = ~(split.train | split.val | split.test)
    groups = [np.flatnonzero(m) for m in (split.train, split.val, split.test, other)]
    for attempt in range(2):
        chunks = [np.array_split(rng.permutation(ids), batch_count) for ids in groups]
        if all(c.size > 0 for c in chunks[0]):
            break
        logger.warning("a batch received no training node; resampling")
    else:
        raise ContractError(
            f"{groups[0].size} training nodes cannot cover {batch_count} batches"
        )
    batches = []
    for b in range(batch_count):
        ids = np.sort(np.concatenate([c[b] for c in chunks]))
        sub, _, _ = induced_subgraph(g, ids)
        batches.append(NodeBatch(sub, ids, split.train[ids]))
    return batches


# -- node classification ----------------------------------------------------------

def _l2_term(params, coef):
    if not coef:
        return None
    total = None
    for p in params:
        term = ad.sum(ad.elementwise_mul(p, p))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, coef / 2.0)


def build_node_model(g: Graph, config: TrainConfig, rng, num_classes=None):
    return CensNet(
        g.node_dim, g.edge_dim, layer_plan(config.hidden, num_classes or g.num_classes), rng,
        activation=config.activation, output_activation="identity",
        dropout=config.dropout, add_identity=config.gate_self_loop,
    )


def node_logits(model: CensNet, g: Graph, bundle=None):
    H_v, _ = model.forward(g.X, g.Z, bundle or g.bundle, train=False)
    return H_v.value


def train_node_classification(g: Graph, split: NodeSplit, config: TrainConfig, bundle=None, model=None):
    """Semi-supervised node classification with early stopping on validation accuracy.

    Returns ``(report, model)`` with the model restored to its best epoch.
    """
    if g.labels is None:
        raise ValidationError("node classification needs labels")
    for name in ("train", "val"):
        if not np.any(getattr(split, name) & (g.labels >= 0)):
            raise ContractError(f"the {name} split holds no labeled node")
    has_test = bool(np.any(split.test & (g.labels >= 0)))
    rng = np.random.default_rng(config.seed)
    bundle = bundle or g.bundle
    model = model or build_node_model(g, config, rng)
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    report = TrainReport("node-cls", "accuracy", True, config=config.to_dict())
    best, best_loss, best_weights, stale = None, None, model.get_weights(), 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        batches = (
            [NodeBatch(g, np.arange(g.num_nodes), split.train)]
            if config.batch_count == 1
            else minibatch_partition(g, split, config.batch_count, rng)
        )
        epoch_loss = 0.0
        for batch in batches:
            bb = bundle if batch.graph is g else build_bundle(batch.graph)
            with Tape():
                H_v, _ = model.forward(batch.graph.X, batch.graph.Z, bb, train=True, rng=rng)
                loss = masked_cross_entropy(H_v, np.maximum(batch.graph.labels, 0), batch.train)
                reg = _l2_term(model.parameters(), config.l2)
                total = loss if reg is None else ad.add(loss, reg)
            ad.backward(total)
            opt.step()
            opt.zero_grad()
            epoch_loss += _check_loss(loss.item(), epoch) / len(batches)
        logits = node_logits(model, g, bundle)
        pred = logits.argmax(axis=1)
        accs = [accuracy(pred, g.labels, m & (g.labels >= 0)) for m in (split.train, split.val)]
        accs.append(accuracy(pred, g.labels, split.test & (g.labels >= 0)) if has_test else None)
        val_loss = masked_cross_entropy(logits, np.maximum(g.labels, 0), split.val & (g.labels >= 0)).item()
        report.add(EpochRecord(epoch, epoch_loss, accs[0], accs[1], accs[2], time.perf_counter() - start))
        improved = best is None or accs[1] > best or (accs[1] == best and val_loss < best_loss)
        if improved:
            best, best_loss, best_weights, stale = accs[1], val_loss, model.get_weights(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    model.set_weights(best_weights)
    pred = node_logits(model, g, bundle).argmax(axis=1)
    report.final = {
        name: accuracy(pred, g.labels, m & (g.labels >= 0))
        for name, m in split.as_dict().items() if np.any(m & (g.labels >= 0))
    }
    return report, model


# -- graph-level tasks ------------------------------------------------------------

def graph_predictions(model: CensNet, graphs, batch_size=256):
    """Pooled per-graph outputs (logits or regression values), ``q x k``."""
    out = []
    for s in range(0, len(graphs), batch_size):
        batch = block_diag_batch(graphs[s : s + batch_size])
        H_v, _ = model.forward(batch.graph.X, batch.graph.Z, batch.graph.bundle, train=False)
        out.append(ad.mean_pool_rows(H_v, batch.segment_ids, batch.num_graphs).value)
    return np.vstack(out)


def _graph_metric(task, pred, targets, mask):
    if task == "graph-cls":
        return multitask_auc(pred, targets, mask)
    return rmse(pred, targets, mask)


def train_graph_level(graphs, splits, config: TrainConfig, task="graph-cls", model=None):
    """Graph classification (multi-task, missing-aware) or regression.

    ``splits`` is ``(train_idx, val_idx, test_idx)``. Graphs are merged
    block-diagonally into mini-batches of ``config.batch_size``; node
    outputs are mean-pooled per graph. Classification monitors mean task
    AUC, regression RMSE; the best validation epoch is restored.
    """
    if task not in ("graph-cls", "graph-reg"):
        raise ValidationError(f"unknown graph task {task!r}")
    graphs = list(graphs)
    if any(g.targets is None for g in graphs):
        raise ValidationError("every graph needs targets")
    widths = {g.targets.shape[0] for g in graphs}
    if len(widths) != 1:
        raise ValidationError(f"inconsistent target widths {sorted(widths)}")
    k = widths.pop()
    if task == "graph-cls":
        t = np.concatenate([g.targets[g.target_mask] for g in graphs])
        if not np.all((t == 0) | (t == 1)):
            raise ValidationError("classification targets must be 0/1")
    train_idx, val_idx, test_idx = (np.asarray(s, dtype=np.int64) for s in splits)
    rng = np.random.default_rng(config.seed)
    g0 = graphs[0]
    model = model or CensNet(
        g0.node_dim, g0.edge_dim, layer_plan(config.hidden, k), rng,
        activation=config.activation, output_activation="identity",
        dropout=config.dropout, add_identity=config.gate_self_loop,
    )
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    higher = task == "graph-cls"
    report = TrainReport(task, "auc" if higher else "rmse", higher, config=config.to_dict())
    T = np.vstack([g.targets for g in graphs])
    M = np.vstack([g.target_mask for g in graphs])
    sets = {"train": train_idx, "val": val_idx, "test": test_idx}
    eval_lists = {name: [graphs[i] for i in idx] for name, idx in sets.items()}
    best, best_weights, stale = None, model.get_weights(), 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        epoch_loss, n_batches = 0.0, 0
        for s in range(0, order.size, config.batch_size):
            batch = block_diag_batch([graphs[i] for i in order[s : s + config.batch_size]])
            if not batch.target_mask.any():
                continue
            with Tape():
                H_v, _ = model.forward(batch.graph.X, batch.graph.Z, batch.graph.bundle, train=True, rng=rng)
                pooled = ad.mean_pool_rows(H_v, batch.segment_ids, batch.num_graphs)
                if higher:
                    loss = multitask_cross_entropy(pooled, batch.targets, batch.target_mask)
                else:
                    loss = regularized_mse(
                        pooled, batch.targets, batch.target_mask, model.parameters(),
                        config.reg_lambda, config.reg_p, config.reg_reduction,
                    )
                reg = _l2_term(model.parameters(), config.l2)
                total = loss if reg is None else ad.add(loss, reg)
            ad.backward(total)
            opt.step()
            opt.zero_grad()
            epoch_loss += _check_loss(loss.item(), epoch)
            n_batches += 1
        metrics = {}
        for name, idx in sets.items():
            if idx.size == 0:
                metrics[name] = None
                continue
            pred = graph_predictions(model, eval_lists[name])
            try:
                metrics[name] = _graph_metric(task, pred, T[idx], M[idx])
            except ContractError:
                metrics[name] = None
        report.add(EpochRecord(epoch, epoch_loss / max(n_batches, 1), metrics["train"], metrics["val"],
                               metrics["test"], time.perf_counter() - start))
        v = metrics["val"] if metrics["val"] is not None else metrics["train"]
        if v is not None and _better(v, best, higher):
            best, best_weights, stale = v, model.get_weights(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    model.set_weights(best_weights)
    report.final = {}
    for name, idx in sets.items():
        if idx.size:
            try:
                report.final[name] = _graph_metric(task, graph_predictions(model, eval_lists[name]), T[idx], M[idx])
            except ContractError:
                pass
    return report, model


# -- link prediction --------------------------------------------------------------

def encode_mean(params: VAEParams, g: Graph, add_identity=False, bundle=None):
    enc = vae_encode(g.X, g.Z, bundle or g.bundle, params, add_identity)
    return enc.mu.value


def link_logits(embeddings, pairs):
    """``<m_i, m_j>`` for each pair."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    m = np.asarray(embeddings)
    return np.einsum("ij,ij->i", m[pairs[:, 0]], m[pairs[:, 1]])


def link_scores(embeddings, pairs):
    """``sigmoid(<m_i, m_j>)`` for each pair; symmetric in ``i, j``."""
    return 1.0 / (1.0 + np.exp(-link_logits(embeddings, pairs)))


def _link_metrics(mu, split: LinkSplit, which):
    pairs, labels = split.pairs(which)
    # rank on the logits: same order as the sigmoid scores without saturation ties
    s = link_logits(mu, pairs)
    return roc_auc(s, labels), average_precision(s, labels)


def train_link_prediction(g: Graph, config: TrainConfig, split: LinkSplit | None = None, params=None):
    """Variational autoencoder training on the link split's training graph.

    Scores held-out pairs with the encoder means. Returns
    ``(report, params, embeddings, split)``.
    """
    split = split or link_split(g, config.seed)
    train_g = split.train_graph
    rng = np.random.default_rng(config.seed)
    bundle = train_g.bundle
    params = params or VAEParams.init(
        train_g.node_dim, train_g.edge_dim, rng,
        hidden=config.hidden[0], latent=config.latent, edge_hidden=config.edge_hidden,
    )
    n = train_g.num_nodes
    target = bundle.A_v.to_dense() + np.eye(n)
    pos_weight, norm = reconstruction_weights(target)
    opt = Adam(params.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    report = TrainReport("link-pred", "auc", True, config=config.to_dict())
    start = time.perf_counter()
    for epoch in range(config.epochs):
        with Tape():
            enc = vae_encode(train_g.X, train_g.Z, bundle, params, config.gate_self_loop,
                             config.dropout, rng, train=True)
            M = reparameterize(enc, rng)
            loss = elbo_loss(vae_decode_logits(M), target, enc, pos_weight, norm, from_logits=True)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        last = epoch == config.epochs - 1
        val = test = None
        if last or (config.eval_every and epoch % config.eval_every == 0):
            mu = encode_mean(params, train_g, config.gate_self_loop, bundle)
            val = _link_metrics(mu, split, "val")[0] if len(split.val_pos) else None
            test = _link_metrics(mu, split, "test")[0] if len(split.test_pos) else None
        report.add(EpochRecord(epoch, _check_loss(loss.item(), epoch), None, val, test,
                               time.perf_counter() - start))
    report.best_epoch = config.epochs - 1
    mu = encode_mean(params, train_g, config.gate_self_loop, bundle)
    report.final = {}
    for which in ("val", "test"):
        if len(getattr(split, f"{which}_pos")):
            auc, ap = _link_metrics(mu, split, which)
            report.final[f"{which}_auc"] = auc
            report.final[f"{which}_ap"] = ap
    return report, params, mu, split


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, weights, names, config: TrainConfig, extra=None):
    """JSON record of every parameter matrix plus the config and its hash."""
    record = {
        "schema_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "parameters": [
            {"name": n, "shape": list(w.shape), "data": w.ravel().tolist()} for n, w in zip(names, weights)
        ],
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(record), encoding="utf-8")
    return record


def load_checkpoint(path):
    """Returns ``(config, weights, names, extra)``."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError("checkpoint not found", path=path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid checkpoint: {exc}", path=path) from None
    if record.get("schema_version") != CHECKPOINT_VERSION:
        raise DataFormatError("unsupported checkpoint version", path=path)
    config = TrainConfig.from_dict(record["config"])
    if config.digest() != record.get("config_hash"):
        raise DataFormatError("config hash mismatch", path=path)
    weights = [np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for p in record["parameters"]]
    names = [p["name"] for p in record["parameters"]]
    return config, weights, names, record.get("extra", {})
