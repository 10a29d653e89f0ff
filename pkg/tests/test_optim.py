import json

import numpy as np
import pytest

from censnet import autodiff as ad
from censnet.autodiff import Tape, Variable
from censnet.data import (
    few_shot_split,
    graph_split,
    link_split,
    planted_partition_graph,
    planted_pooled_regression,
)
from censnet.data.splits import NodeSplit
from censnet.exceptions import ContractError, DataFormatError, NumericalError, ShapeError, ValidationError
from censnet.graph import build_bundle
from censnet.optim import Adam, AdamState, adam_step, glorot_init
from censnet.training import (
    TrainConfig,
    TrainReport,
    graph_predictions,
    link_scores,
    load_checkpoint,
    minibatch_partition,
    save_checkpoint,
    train_graph_level,
    train_link_prediction,
    train_node_classification,
)

from conftest import random_graph


@pytest.fixture(scope="module")
def planted():
    return planted_partition_graph(200, seed=0)


# -- glorot -----------------------------------------------------------------------

def test_glorot_bounds_and_variance():
    rows, cols = 100, 100
    W = glorot_init(rows, cols, np.random.default_rng(0))
    bound = np.sqrt(6 / (rows + cols))
    assert W.size == 10_000
    assert np.all(np.abs(W) <= bound)
    assert abs(W.var() / (2 / (rows + cols)) - 1) < 0.1


def test_glorot_deterministic():
    a = glorot_init(7, 3, np.random.default_rng(5))
    b = glorot_init(7, 3, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ContractError):
        glorot_init(0, 3, np.random.default_rng(0))


# -- adam ----------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([[1.0, -2.0]])
    state = AdamState.for_params([p], lr=0.1)
    adam_step([p], [np.zeros_like(p)], state)
    np.testing.assert_array_equal(p, [[1.0, -2.0]])


def test_adam_first_step_hand_evaluation():
    for g in (0.3, -5.0, 1e-3):
        p = np.array([[2.0]])
        state = AdamState.for_params([p], lr=0.01)
        adam_step([p], [np.array([[g]])], state)
        # m_hat = g, v_hat = g^2 at t = 1
        expected = 2.0 - 0.01 * g / (abs(g) + 1e-8)
        assert abs(p[0, 0] - expected) < 1e-15
        assert abs(abs(p[0, 0] - 2.0) - 0.01) < 1e-4


def test_adam_quadratic_bowl():
    w = Variable(np.array([[1.0, -0.5, 0.8]]), requires_grad=True)
    opt = Adam([w], lr=0.01)
    for _ in range(500):
        with Tape():
            loss = ad.sum(ad.elementwise_mul(w, w))
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    assert np.linalg.norm(w.value) < 1e-3


def test_adam_shape_mismatch():
    p = np.zeros((2, 2))
    state = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros((2, 3))], state)
    with pytest.raises(ShapeError):
        adam_step([p, p], [p], state)


def test_adam_decoupled_weight_decay():
    p = np.array([[1.0]])
    state = AdamState.for_params([p], lr=0.1, weight_decay=0.5)
    adam_step([p], [np.zeros_like(p)], state)
    assert p[0, 0] == 1.0 - 0.1 * 0.5


# -- mini-batching ----------------------------------------------------------------------

def test_single_batch_is_whole_graph(planted):
    split = few_shot_split(planted, 0.1, 0)
    (batch,) = minibatch_partition(planted, split, 1, np.random.default_rng(0))
    assert batch.graph is planted
    np.testing.assert_array_equal(batch.train, split.train)


def test_batches_partition_nodes_proportionally(planted):
    split = few_shot_split(planted, 0.1, 0)
    total = np.array(split.sizes())
    for k in (2, 3, 5):
        batches = minibatch_partition(planted, split, k, np.random.default_rng(k))
        ids = np.concatenate([b.node_ids for b in batches])
        np.testing.assert_array_equal(np.sort(ids), np.arange(planted.num_nodes))
        for b in batches:
            counts = np.array([m[b.node_ids].sum() for m in (split.train, split.val, split.test)])
            assert np.all(np.abs(counts - total / k) <= 1)


def test_batch_edges_are_batch_local(planted):
    split = few_shot_split(planted, 0.1, 0)
    batches = minibatch_partition(planted, split, 4, np.random.default_rng(0))
    claimed = 0
    for b in batches:
        inside = set(b.node_ids.tolist())
        brute = [(u, v) for u, v in planted.edges if u in inside and v in inside]
        assert b.graph.num_edges == len(brute)
        np.testing.assert_array_equal(b.node_ids[b.graph.edges], np.array(brute).reshape(-1, 2))
        claimed += b.graph.num_edges
        build_bundle(b.graph, check=True)
    assert claimed <= planted.num_edges


def test_batch_without_training_node_is_an_error(planted):
    train = np.zeros(planted.num_nodes, bool)
    train[0] = True
    split = NodeSplit(train, ~train, np.zeros_like(train))
    with pytest.raises(ContractError):
        minibatch_partition(planted, split, 3, np.random.default_rng(0))


# -- node classification ---------------------------------------------------------------

def test_node_classification_learns_planted_partition(planted):
    split = few_shot_split(planted, 0.1, 0)
    cfg = TrainConfig.defaults_for("node-cls", epochs=200, seed=0)
    report, _ = train_node_classification(planted, split, cfg)
    assert report.final["train"] >= 0.95
    assert report.final["test"] >= 0.90
    assert len(report.history) <= 200


def test_node_classification_is_deterministic(planted):
    split = few_shot_split(planted, 0.1, 1)
    cfg = TrainConfig.defaults_for("node-cls", epochs=30, seed=3)
    a, ma = train_node_classification(planted, split, cfg)
    b, mb = train_node_classification(planted, split, cfg)
    assert a.to_dict(timing=False) == b.to_dict(timing=False)
    for x, y in zip(ma.get_weights(), mb.get_weights()):
        np.testing.assert_array_equal(x, y)


def test_dropout_free_reports_identical(planted):
    split = few_shot_split(planted, 0.1, 1)
    cfg = TrainConfig.defaults_for("node-cls", epochs=15, seed=4, dropout=0.0)
    a, _ = train_node_classification(planted, split, cfg)
    b, _ = train_node_classification(planted, split, cfg)
    assert a.to_dict(timing=False) == b.to_dict(timing=False)


def test_loss_non_increasing_first_ten_epochs(planted):
    monotone = 0
    for seed in range(10):
        cfg = TrainConfig.defaults_for("node-cls", epochs=10, seed=seed, dropout=0.0, patience=0)
        report, _ = train_node_classification(planted, few_shot_split(planted, 0.1, seed), cfg)
        monotone += bool(np.all(np.diff(report.losses) <= 0))
    assert monotone >= 8


def test_minibatch_training_runs(planted):
    split = few_shot_split(planted, 0.1, 0)
    cfg = TrainConfig.defaults_for("node-cls", epochs=60, seed=0, batch_count=2)
    report, _ = train_node_classification(planted, split, cfg)
    assert report.final["test"] >= 0.8


def test_node_classification_needs_labeled_splits(planted):
    empty = np.zeros(planted.num_nodes, bool)
    split = few_shot_split(planted, 0.1, 0)
    with pytest.raises(ContractError):
        train_node_classification(planted, NodeSplit(split.train, empty, split.test), TrainConfig(epochs=1))


def test_non_finite_loss_raises(planted):
    bad = planted.with_features(X=planted.X * 1e200)
    split = few_shot_split(planted, 0.1, 0)
    with pytest.raises(NumericalError), np.errstate(all="ignore"):
        train_node_classification(bad, split, TrainConfig(epochs=5, dropout=0.0))


# -- graph level ---------------------------------------------------------------------------

def test_graph_regression_planted_linear_target():
    graphs = planted_pooled_regression(q=200, seed=0)
    splits = graph_split(len(graphs), 0.8, 0)
    cfg = TrainConfig.defaults_for("graph-reg", epochs=200, seed=0)
    report, model = train_graph_level(graphs, splits, cfg, task="graph-reg")
    y = np.array([g.targets[0] for g in graphs])
    assert report.final["test"] < 0.1 * y[splits[2]].std()


def test_single_graph_batch_equals_full_pass(rng):
    from censnet.layers import CensNet, mean_pool

    graphs = [random_graph(rng) for _ in range(3)]
    model = CensNet(3, 2, [("node", 4), ("edge", 4), ("node", 2)], rng)
    pooled = graph_predictions(model, graphs, batch_size=1)
    for k, g in enumerate(graphs):
        H, _ = model.forward(g.X, g.Z, build_bundle(g))
        np.testing.assert_allclose(pooled[k], mean_pool(H, np.zeros(g.num_nodes)).value[0], atol=1e-12)
    np.testing.assert_allclose(graph_predictions(model, graphs, batch_size=8), pooled, atol=1e-12)


def test_graph_level_rejects_inconsistent_targets(rng):
    from censnet.graph import Graph

    g1 = Graph(2, [[0, 1]], np.ones((2, 1)), np.ones((1, 1)), targets=[1.0])
    g2 = Graph(2, [[0, 1]], np.ones((2, 1)), np.ones((1, 1)), targets=[1.0, 0.0])
    with pytest.raises(ValidationError):
        train_graph_level([g1, g2], ([0], [1], [1]), TrainConfig(epochs=1))
    g3 = Graph(2, [[0, 1]], np.ones((2, 1)), np.ones((1, 1)), targets=[0.5])
    with pytest.raises(ValidationError):
        train_graph_level([g1, g3], ([0], [1], [1]), TrainConfig(epochs=1), task="graph-cls")


# -- link prediction ------------------------------------------------------------------------

def test_link_defaults():
    cfg = TrainConfig.defaults_for("link-pred")
    assert cfg.hidden == (64,) and cfg.latent == 32 and cfg.lr == 0.01 and cfg.epochs == 400


def test_link_scores_symmetric(rng):
    M = rng.standard_normal((6, 4))
    pairs = rng.integers(0, 6, (10, 2))
    np.testing.assert_array_equal(link_scores(M, pairs), link_scores(M, pairs[:, ::-1]))


def test_link_training_short_run(planted):
    split = link_split(planted, 0, 0.05, 0.10)
    cfg = TrainConfig.defaults_for("link-pred", epochs=20, seed=0)
    report, params, mu, _ = train_link_prediction(planted, cfg, split)
    assert mu.shape == (planted.num_nodes, 32)
    assert set(report.final) == {"val_auc", "val_ap", "test_auc", "test_ap"}
    assert len(report.history) == 20


# -- reports and checkpoints ------------------------------------------------------------------

def test_report_epochs_monotone():
    from censnet.training import EpochRecord

    r = TrainReport("node-cls", "accuracy", True)
    r.add(EpochRecord(0, 1.0, None, None, None, 0.0))
    with pytest.raises(ContractError):
        r.add(EpochRecord(0, 1.0, None, None, None, 0.0))


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = TrainConfig(seed=9)
    weights = [rng.standard_normal((3, 2)), rng.standard_normal((2, 1))]
    save_checkpoint(tmp_path / "c.json", weights, ["a", "b"], cfg, {"k": 1})
    cfg2, w2, names, extra = load_checkpoint(tmp_path / "c.json")
    assert cfg2 == cfg and names == ["a", "b"] and extra == {"k": 1}
    for a, b in zip(weights, w2):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_tampering_detected(tmp_path, rng):
    save_checkpoint(tmp_path / "c.json", [np.ones((1, 1))], ["a"], TrainConfig())
    rec = json.loads((tmp_path / "c.json").read_text())
    rec["config"]["lr"] = 0.5
    (tmp_path / "c.json").write_text(json.dumps(rec))
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "c.json")
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "missing.json")


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(hidden=(0,))
    with pytest.raises(ValidationError):
        TrainConfig.defaults_for("nope")
