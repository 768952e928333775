import json

import numpy as np
import pytest

from cagnn.graph import DatasetBundle, NodeTable, SplitSet, make_synthetic, stratified_split
from cagnn.models import CagnnModel, ModelConfig, build_propagation
from cagnn import autodiff as ad
from cagnn.trainer import (DivergenceError, Grids, TrainConfig, TrainReport, grid_search, sweep_layers,
                           sweep_noise, train_one)

FAST = TrainConfig(max_epochs=60, patience=30)
SMALL_GRID = Grids(lr=(0.01, 0.05), weight_decay=(5e-4,), dropout=(0.0,))


def multi_split(bundle, k=3):
    splits = tuple(stratified_split(bundle.labels, seed=s) for s in range(k))
    return DatasetBundle(bundle.graph, bundle.nodes, SplitSet(splits), bundle.name)


@pytest.fixture(scope="module")
def patterned():
    return multi_split(make_synthetic("patterned", 30, 3, 5, seed=0, feature_noise=1.0))


def test_mlp_on_pure_homophily():
    b = make_synthetic("pure-homophily", 60, 3, 5, seed=0)
    r = train_one(b, b.splits[0], ModelConfig(kernel="mlp", mode="vanilla", hidden=16), TrainConfig())
    assert r.test_accuracy >= 0.95


def test_vanilla_gcn_on_bipartite_uses_the_graph():
    # noisy features make the graph the main signal
    b = make_synthetic("bipartite", 100, 2, 6, seed=0, feature_noise=1.0)
    tc = TrainConfig(max_epochs=200, patience=100)
    gcn = train_one(b, b.splits[0], ModelConfig(mode="vanilla", hidden=32), tc)
    mlp = train_one(b, b.splits[0], ModelConfig(kernel="mlp", mode="vanilla", hidden=32), tc)
    assert gcn.test_accuracy >= 0.9
    assert gcn.test_accuracy > mlp.test_accuracy


def test_zero_learning_rate_leaves_parameters(patterned):
    cfg = ModelConfig(hidden=8)
    tc = TrainConfig(lr=0.0, max_epochs=5, patience=5, seed=4)
    r = train_one(patterned, patterned.splits[0], cfg, tc)
    init = CagnnModel(cfg.replace(dropout=tc.dropout), 3, 3, seed=4)
    for name, arr in init.state_dict().items():
        np.testing.assert_array_equal(r.model.params[name].data, arr)
    op = build_propagation(patterned.graph, "gcn")
    with ad.no_grad():
        lp = init.forward(op, patterned.features).logits.data
    test = patterned.splits[0].test
    assert r.test_accuracy == np.mean(lp[test].argmax(axis=1) == patterned.labels[test])


def test_test_labels_are_never_read(patterned):
    split = patterned.splits[0]
    scrambled = patterned.labels.copy()
    scrambled[split.test] = (scrambled[split.test] + 1) % 3
    other = DatasetBundle(patterned.graph, NodeTable(patterned.features.copy(), scrambled, 3),
                          patterned.splits, patterned.name)
    a = train_one(patterned, split, ModelConfig(hidden=8), FAST)
    b = train_one(other, split, ModelConfig(hidden=8), FAST)
    assert a.val_curve == b.val_curve and a.best_epoch == b.best_epoch
    for name, t in a.model.params.items():
        np.testing.assert_array_equal(t.data, b.model.params[name].data)


def test_early_stopping_and_selection(patterned):
    r = train_one(patterned, patterned.splits[0], ModelConfig(hidden=8), FAST)
    assert r.val_accuracy == max(r.val_curve)
    assert r.val_curve[r.best_epoch - 1] == r.val_accuracy
    assert r.epochs == len(r.val_curve)
    assert r.epochs == FAST.max_epochs or r.epochs - r.best_epoch >= FAST.patience


def test_singleton_grid_equals_train_one(patterned):
    cfg = ModelConfig(hidden=8)
    base = TrainConfig(max_epochs=40, patience=20, seed=5)
    grid = Grids(lr=(0.01,), weight_decay=(5e-4,), dropout=(0.5,))
    rep = grid_search(patterned, cfg, grid, base)
    for i, split in enumerate(patterned.splits):
        tc = TrainConfig(lr=0.01, weight_decay=5e-4, dropout=0.5, max_epochs=40, patience=20, seed=5 ^ i)
        assert rep.test_accuracies[i] == train_one(patterned, split, cfg, tc).test_accuracy


def test_report_is_reproducible_and_consistent(patterned):
    cfg = ModelConfig(hidden=8)
    a = grid_search(patterned, cfg, SMALL_GRID, FAST)
    b = grid_search(patterned, cfg, SMALL_GRID, FAST)
    strip = lambda r: {k: v for k, v in r.to_dict().items() if k != "ms_per_epoch"}  # noqa: E731
    assert strip(a) == strip(b)
    assert a.mean == pytest.approx(np.mean(a.test_accuracies), abs=1e-12)
    assert a.std == pytest.approx(np.std(a.test_accuracies), abs=1e-12)
    assert len(a.alpha_means) == 3 and len(a.alpha_means[0]) == cfg.layers
    assert all(p in list(SMALL_GRID.points()) for p in a.best_params)
    back = TrainReport.from_dict(json.loads(json.dumps(a.to_dict())))
    assert back == a


def test_parallel_matches_serial(patterned):
    cfg = ModelConfig(hidden=8)
    serial = grid_search(patterned, cfg, SMALL_GRID, FAST, jobs=1)
    parallel = grid_search(patterned, cfg, SMALL_GRID, FAST, jobs=2)
    assert serial.test_accuracies == parallel.test_accuracies
    assert serial.best_params == parallel.best_params


def test_sweeps(patterned):
    cfg = ModelConfig(hidden=8)
    grid = Grids(lr=(0.01,), weight_decay=(5e-4,), dropout=(0.0,))
    rows = sweep_layers(patterned, cfg, depths=(1, 3), grids=grid, base=FAST, splits=[0])
    assert [r["x"] for r in rows] == [1, 3]
    clean = grid_search(patterned, cfg, grid, FAST, splits=[0])
    noisy = sweep_noise(patterned, cfg, ratios=(0, 1.0), seed=3, grids=grid, base=FAST, splits=[0])
    assert noisy[0]["mean"] == clean.mean
    again = sweep_noise(patterned, cfg, ratios=(0, 1.0), seed=3, grids=grid, base=FAST, splits=[0])
    assert [r["mean"] for r in again] == [r["mean"] for r in noisy]


def test_divergence_is_reported():
    b = make_synthetic("patterned", 10, 3, 3, seed=0)
    feats = b.features.copy()
    feats[:, 0] = np.nan
    bad = DatasetBundle(b.graph, NodeTable(feats, b.labels.copy(), 3), b.splits, b.name)
    with pytest.raises(DivergenceError, match="lr="):
        train_one(bad, bad.splits[0], ModelConfig(kernel="mlp", mode="vanilla"), FAST)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=20)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        grid_search(make_synthetic("patterned", 10, 3, 3, seed=0), ModelConfig(), Grids(lr=()))
