"""Full-batch training, grid search over the standard hyper-parameter sets,
and depth / noisy-edge sweeps."""
from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from cagnn import autodiff as ad
from cagnn.graph import DatasetBundle, Split, add_random_edges
from cagnn.models import CagnnModel, ModelConfig, build_propagation

log = logging.getLogger(__name__)

LR_GRID = (0.001, 0.01, 0.05)
WEIGHT_DECAY_GRID = (5e-5, 5e-4)
DROPOUT_GRID = (0.0, 0.5)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 500
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < self.patience:
            raise ValueError("max_epochs must be >= patience")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")


@dataclass(frozen=True)
class Grids:
    lr: tuple = LR_GRID
    weight_decay: tuple = WEIGHT_DECAY_GRID
    dropout: tuple = DROPOUT_GRID

    def points(self):
        for lr, wd, p in itertools.product(self.lr, self.weight_decay, self.dropout):
            yield {"lr": lr, "weight_decay": wd, "dropout": p}

    def __len__(self):
        return len(self.lr) * len(self.weight_decay) * len(self.dropout)


@dataclass
class RunResult:
    model: CagnnModel
    val_curve: list
    val_accuracy: float
    val_loss: float
    test_accuracy: float
    epochs: int
    ms_per_epoch: float
    best_epoch: int


@dataclass
class TrainReport:
    test_accuracies: list
    mean: float
    std: float
    best_params: list          # per split: {"lr", "weight_decay", "dropout"}
    epochs: list               # per split, epochs run by the selected point
    ms_per_epoch: float
    alpha_means: list = field(default_factory=list)   # per split, per layer
    model_config: dict = field(default_factory=dict)
    dataset: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainReport":
        return cls(**d)


def accuracy(log_probs: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    if len(idx) == 0:
        return float("nan")
    return float((log_probs[idx].argmax(axis=1) == labels[idx]).mean())


def _nll(log_probs, labels, idx) -> float:
    return float(-log_probs[idx, labels[idx]].mean())


def train_one(bundle: DatasetBundle, split: Split, model_config: ModelConfig,
              train_config: TrainConfig, op=None) -> RunResult:
    """Train one model on one split with early stopping on validation accuracy.

    Test labels are hidden (set to -1) for the whole training loop and only
    consulted once, for the parameters kept at the best validation epoch.
    Ties in validation accuracy are broken by lower validation loss.
    """
    cfg = model_config.replace(dropout=train_config.dropout)
    if op is None:
        op = build_propagation(bundle.graph, cfg.kernel)
    labels = np.asarray(bundle.labels)
    visible = labels.copy()
    visible[split.test] = -1
    X = ad.Tensor(bundle.features)
    model = CagnnModel(cfg, bundle.features.shape[1], bundle.num_classes, seed=train_config.seed)
    params = model.parameters()
    state = ad.AdamState(lr=train_config.lr, weight_decay=train_config.weight_decay)

    best = (-1.0, math.inf)
    best_state = model.state_dict()
    best_epoch = 0
    curve = []
    since = 0
    spent = 0.0
    epoch = 0
    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        model.zero_grad()
        trace = model.forward(op, X, training=True)
        loss = ad.masked_cross_entropy(trace.logits, visible, split.train)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"loss became {loss.item()} at epoch {epoch} with {cfg} / {train_config}")
        loss.backward()
        ad.adam_step(params, state)
        spent += time.perf_counter() - t0

        with ad.no_grad():
            lp = model.forward(op, X, training=False).logits.data
        val_acc = accuracy(lp, visible, split.val)
        val_loss = _nll(lp, visible, split.val)
        curve.append(val_acc)
        if val_acc > best[0] or (val_acc == best[0] and val_loss < best[1]):
            best = (val_acc, val_loss)
            best_state = model.state_dict()
            best_epoch = epoch
            since = 0
        else:
            since += 1
            if since >= train_config.patience:
                break

    model.load_state_dict(best_state)
    with ad.no_grad():
        lp = model.forward(op, X, training=False).logits.data
    test_acc = accuracy(lp, labels, split.test)
    return RunResult(model, curve, best[0], best[1], test_acc, epoch,
                     1000.0 * spent / max(epoch, 1), best_epoch)


def _run_task(args):
    bundle, split_index, model_config, point, base, op = args
    tc = TrainConfig(lr=point["lr"], weight_decay=point["weight_decay"], dropout=point["dropout"],
                     max_epochs=base.max_epochs, patience=base.patience,
                     seed=base.seed ^ split_index)
    res = train_one(bundle, bundle.splits[split_index], model_config, tc, op=op)
    alphas = []
    if model_config.mode == "cagnn":
        with ad.no_grad():
            trace = res.model.forward(op, ad.Tensor(bundle.features), training=False)
        alphas = [float(a.mean()) for a in trace.alphas]
    return (split_index, point, res.val_accuracy, res.val_loss, res.test_accuracy,
            res.epochs, res.ms_per_epoch, alphas)


def grid_search(bundle: DatasetBundle, model_config: ModelConfig, grids: Grids | None = None,
                base: TrainConfig | None = None, jobs: int = 1, splits=None) -> TrainReport:
    """Pick the best grid point per split by validation accuracy.

    Per-run seeds are ``base.seed XOR split_index``, shared by all grid
    points of a split.  Reported std is the population standard deviation
    over splits.
    """
    grids = Grids() if grids is None else grids
    base = TrainConfig() if base is None else base
    if len(grids) == 0:
        raise ValueError("empty hyper-parameter grid")
    split_ids = list(range(len(bundle.splits))) if splits is None else list(splits)
    if not split_ids:
        raise ValueError("bundle has no splits")
    op = build_propagation(bundle.graph, model_config.kernel)
    tasks = [(bundle, s, model_config, p, base, op) for s in split_ids for p in grids.points()]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]

    chosen = {}
    for r in results:  # results keep task order, so ties go to the earlier grid point
        s = r[0]
        if s not in chosen or (r[2], -r[3]) > (chosen[s][2], -chosen[s][3]):
            chosen[s] = r
    accs = [chosen[s][4] for s in split_ids]
    report = TrainReport(
        test_accuracies=accs,
        mean=float(np.mean(accs)),
        std=float(np.std(accs)),
        best_params=[chosen[s][1] for s in split_ids],
        epochs=[chosen[s][5] for s in split_ids],
        ms_per_epoch=float(np.mean([r[6] for r in results])),
        alpha_means=[chosen[s][7] for s in split_ids],
        model_config=asdict(model_config),
        dataset=bundle.name,
    )
    log.info("%s %s/%s: %.4f +- %.4f", bundle.name, model_config.mode, model_config.kernel,
             report.mean, report.std)
    return report


def sweep_layers(bundle, model_config: ModelConfig, depths=(2, 4, 8, 16, 32), grids=None,
                 base=None, jobs=1, splits=None) -> list[dict]:
    rows = []
    for depth in depths:
        rep = grid_search(bundle, model_config.replace(layers=int(depth)), grids, base, jobs, splits)
        rows.append({"x": depth, "mean": rep.mean, "std": rep.std})
    return rows


def sweep_noise(bundle, model_config: ModelConfig, ratios=(0.25, 0.5, 1, 2, 5), seed: int = 0,
                grids=None, base=None, jobs=1, splits=None) -> list[dict]:
    rows = []
    for ratio in ratios:
        noisy = bundle.with_graph(add_random_edges(bundle.graph, float(ratio), seed))
        rep = grid_search(noisy, model_config, grids, base, jobs, splits)
        rows.append({"x": ratio, "mean": rep.mean, "std": rep.std})
    return rows
