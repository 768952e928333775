"""Command-line entry point: ``cagnn <command> [options]``.

Exit status is 0 on success, 1 for invalid input (bad flags, unreadable
bundles, inconsistent options) and 2 when the work itself fails.
Every output file is written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from cagnn import autodiff as ad
from cagnn import metrics
from cagnn.graph import (SYNTHETIC_KINDS, BundleError, Graph, atomic_write_text, load_bundle,
                         make_synthetic, save_bundle)
from cagnn.models import (KERNELS, MIXERS, MODES, NORMS, ModelConfig, build_propagation,
                          load_checkpoint, save_checkpoint, spectral_check, sym_normalized_adjacency)
from cagnn.trainer import Grids, TrainConfig, grid_search, sweep_layers, sweep_noise, train_one

log = logging.getLogger("cagnn")

SPECTRAL_TOLERANCE = 1e-8


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}\n{self.format_usage()}")


# -------------------------------------------------------------- flag groups

def _floats(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_grids(text: str | None) -> Grids:
    """Parse ``"lr=0.01,0.05;weight_decay=5e-4;dropout=0,0.5"``.

    Keys left out keep their default grid.
    """
    if not text:
        return Grids()
    values = {}
    aliases = {"lr": "lr", "wd": "weight_decay", "weight_decay": "weight_decay", "dropout": "dropout"}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, rhs = part.partition("=")
        key = key.strip().replace("-", "_")
        if key not in aliases or not rhs:
            raise ValidationError(f"bad grid entry {part!r}; expected lr=..;weight_decay=..;dropout=..")
        try:
            values[aliases[key]] = _floats(rhs)
        except argparse.ArgumentTypeError as exc:
            raise ValidationError(str(exc)) from None
    return Grids(**values)


def _add_model_flags(p):
    p.add_argument("--kernel", choices=KERNELS, default="gcn")
    p.add_argument("--mode", choices=MODES, default="cagnn")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--mixer", choices=MIXERS, default="linear")
    p.add_argument("--norm", choices=NORMS, default="l2")
    p.add_argument("--gc-activation", choices=("auto", "on", "off"), default="auto",
                   help="ReLU after each graph convolution (auto: off in cagnn, on in vanilla)")


def _add_train_flags(p, single=True):
    if single:
        p.add_argument("--lr", type=float, default=0.01)
        p.add_argument("--weight-decay", type=float, default=5e-4)
        p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)


def _model_config(args, dropout=0.5) -> ModelConfig:
    act = {"auto": None, "on": True, "off": False}[args.gc_activation]
    try:
        return ModelConfig(kernel=args.kernel, mode=args.mode, layers=args.layers, hidden=args.hidden,
                           mixer=args.mixer, norm=args.norm, dropout=dropout, gc_activation=act)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _train_config(args, **kw) -> TrainConfig:
    try:
        return TrainConfig(max_epochs=args.epochs, patience=args.patience, seed=args.seed, **kw)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _load(path):
    try:
        return load_bundle(path)
    except BundleError as exc:
        raise ValidationError(str(exc)) from None


def _emit(text: str, out):
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------- commands

def cmd_metrics(args):
    bundles = [_load(b) for b in args.bundle]
    reports = []
    for b in bundles:
        rep = metrics.metric_report(b.graph, b.labels, b.num_classes, normalize=not args.counts)
        d = {"dataset": b.name, "num_nodes": b.graph.num_nodes,
             "undirected_edges": b.graph.undirected_edge_count,
             "directed_edges": b.graph.directed_edge_count,
             "row_normalized": not args.counts, **rep.to_dict()}
        reports.append((b, rep, d))
    if args.per_class:
        if len(bundles) != 1:
            raise ValidationError("--per-class needs exactly one --bundle")
        _, rep, _ = reports[0]
        rows = [(k, int(rep.class_sizes[k]), repr(float(rep.per_class_entropy[k])))
                for k in range(len(rep.class_sizes))]
        atomic_write_text(args.per_class, _csv_text(["class_id", "n_k", "entropy"], rows))
    if args.table:
        rows = [(d["dataset"], d["num_nodes"], d["h_node"], d["h_edge"], d["h_neighbor"])
                for _, _, d in reports]
        atomic_write_text(args.table, _csv_text(["dataset", "num_nodes", "h_node", "h_edge", "h_neighbor"], rows))
    payload = reports[0][2] if len(reports) == 1 else [d for _, _, d in reports]
    _emit(json.dumps(payload, indent=2) + "\n", args.out)


def cmd_synth(args):
    try:
        b = make_synthetic(args.kind, args.n_per_class, args.classes, args.degree, args.seed,
                           feature_noise=args.feature_noise)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    save_bundle(b, args.out)
    print(f"wrote {b.name}: {b.graph.num_nodes} nodes, {b.graph.undirected_edge_count} edges -> {args.out}")


def cmd_train(args):
    mc = _model_config(args, args.dropout)
    tc = _train_config(args, lr=args.lr, weight_decay=args.weight_decay, dropout=args.dropout)
    bundle = _load(args.bundle)
    if not 0 <= args.split < len(bundle.splits):
        raise ValidationError(f"--split {args.split} out of range (bundle has {len(bundle.splits)})")
    res = train_one(bundle, bundle.splits[args.split], mc, tc)
    if args.checkpoint:
        save_checkpoint(res.model, args.checkpoint)
    out = {"dataset": bundle.name, "split": args.split, "test_accuracy": res.test_accuracy,
           "val_accuracy": res.val_accuracy, "epochs": res.epochs, "best_epoch": res.best_epoch,
           "ms_per_epoch": res.ms_per_epoch, "val_curve": res.val_curve}
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    print(f"ms/epoch (forward+backward+step): {res.ms_per_epoch:.3f}", file=sys.stderr)


def _grid_args(args):
    mc = _model_config(args)
    base = _train_config(args)
    grids = parse_grids(args.grids)
    bundle = _load(args.bundle)
    splits = None
    if args.splits is not None:
        if not 1 <= args.splits <= len(bundle.splits):
            raise ValidationError(f"--splits must lie in [1, {len(bundle.splits)}]")
        splits = range(args.splits)
    return mc, base, grids, bundle, splits


def cmd_grid(args):
    mc, base, grids, bundle, splits = _grid_args(args)
    rep = grid_search(bundle, mc, grids, base, jobs=args.jobs, splits=splits)
    _emit(json.dumps(rep.to_dict(), indent=2) + "\n", args.out)


def _model_tag(mc: ModelConfig) -> str:
    return f"{mc.mode}_{mc.kernel}"


def cmd_sweep_layers(args):
    mc, base, grids, bundle, splits = _grid_args(args)
    if any(d < 1 for d in args.depths):
        raise ValidationError("depths must be >= 1")
    rows = sweep_layers(bundle, mc, args.depths, grids, base, args.jobs, splits)
    _emit(_csv_text(["model", "x", "mean", "std"],
                    [(_model_tag(mc), r["x"], r["mean"], r["std"]) for r in rows]), args.out)


def cmd_noisy_edges(args):
    mc, base, grids, bundle, splits = _grid_args(args)
    if any(not 0 <= r <= 5 for r in args.ratios):
        raise ValidationError("ratios must lie in [0, 5]")
    rows = sweep_noise(bundle, mc, args.ratios, args.seed, grids, base, args.jobs, splits)
    _emit(_csv_text(["model", "x", "mean", "std"],
                    [(_model_tag(mc), r["x"], r["mean"], r["std"]) for r in rows]), args.out)


def alpha_histogram(alphas: list, bins: int = 20) -> list[tuple]:
    """Per-layer counts of gate values over ``bins`` equal bins of [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for l, a in enumerate(alphas, 1):
        counts, _ = np.histogram(np.asarray(a).ravel(), bins=edges)
        rows.extend((l, float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts))
    return rows


def cmd_alpha_hist(args):
    bundle = _load(args.bundle)
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"{args.checkpoint}: cannot load checkpoint ({exc})") from None
    if model.num_features != bundle.features.shape[1] or model.num_classes != bundle.num_classes:
        raise ValidationError(
            f"checkpoint expects {model.num_features} features / {model.num_classes} classes, "
            f"bundle has {bundle.features.shape[1]} / {bundle.num_classes}")
    if model.config.mode != "cagnn" or model.config.mixer in ("add", "concat"):
        raise ValidationError("checkpoint has no gated mixer, so there are no alpha values")
    op = build_propagation(bundle.graph, model.config.kernel)
    with ad.no_grad():
        trace = model.forward(op, ad.Tensor(bundle.features), training=False)
    rows = [(i, l, repr(float(a))) for l, al in enumerate(trace.alphas, 1) for i, a in enumerate(al[:, 0])]
    atomic_write_text(args.out, _csv_text(["node_id", "layer", "alpha"], rows))
    if args.hist_out:
        atomic_write_text(args.hist_out, _csv_text(["layer", "bin_lo", "bin_hi", "count"],
                                                   alpha_histogram(trace.alphas, args.bins)))
    for l, al in enumerate(trace.alphas, 1):
        print(f"layer {l}: mean alpha {al.mean():.4f}")


def random_graph(n: int, seed: int, p: float = 0.4) -> Graph:
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))


def cmd_spectral_check(args):
    if args.nodes < 1 or args.order < 0:
        raise ValidationError("--nodes must be >= 1 and --order >= 0")
    rng = np.random.default_rng(args.seed)
    g = random_graph(args.nodes, args.seed)
    P = sym_normalized_adjacency(g)
    X = rng.random((args.nodes, args.features))
    alphas = [rng.random((args.nodes, 1)) for _ in range(args.order)]
    gammas = rng.normal(size=args.order + 1)
    dev = spectral_check(P, X, alphas, gammas)
    print(f"deviation {dev:.3e}")
    if dev > SPECTRAL_TOLERANCE:
        print(f"deviation exceeds {SPECTRAL_TOLERANCE:g}", file=sys.stderr)
        return 2
    return 0


def kendall_report(results_rows, metric_rows, accuracy_column="accuracy", negate=(),
                   min_nodes=None) -> dict:
    """Kendall tau of every metric column against the accuracy column."""
    res = {r["dataset"]: r for r in results_rows}
    met = {r["dataset"]: r for r in metric_rows}
    if set(res) != set(met):
        raise ValidationError(f"dataset keys differ: results-only {sorted(set(res) - set(met))}, "
                              f"metrics-only {sorted(set(met) - set(res))}")
    keys = sorted(res)
    if len(keys) < 2:
        raise ValidationError("need at least two datasets")
    if accuracy_column not in next(iter(res.values())):
        raise ValidationError(f"results lack column {accuracy_column!r}")
    columns = [c for c in next(iter(met.values())) if c not in ("dataset", "num_nodes")]
    for c in negate:
        if c not in columns:
            raise ValidationError(f"--negate {c!r}: no such metric column")

    def block(subset):
        acc = [float(res[k][accuracy_column]) for k in subset]
        out = {}
        for c in columns:
            sign = -1.0 if c in negate else 1.0
            vals = [sign * float(met[k][c]) for k in subset]
            tau, p = metrics.kendall_tau(vals, acc)
            out[c] = {"tau": tau, "p_value": p}
        return {"datasets": list(subset), "n": len(subset), "columns": out}

    report = {"all": block(keys), "negated": list(negate)}
    if min_nodes is not None:
        if "num_nodes" not in next(iter(met.values())):
            raise ValidationError("--min-nodes needs a num_nodes column in the metrics file")
        big = [k for k in keys if int(float(met[k]["num_nodes"])) > min_nodes]
        if len(big) < 2:
            raise ValidationError(f"fewer than two datasets with more than {min_nodes} nodes")
        report[f"gt_{min_nodes}_nodes"] = block(big)
    return report


def cmd_kendall(args):
    try:
        results_rows, metric_rows = read_csv(args.results), read_csv(args.metrics)
    except OSError as exc:
        raise ValidationError(str(exc)) from None
    if not results_rows or not metric_rows:
        raise ValidationError("need at least two datasets")
    rep = kendall_report(results_rows, metric_rows, args.accuracy_column, args.negate or (), args.min_nodes)
    _emit(json.dumps(rep, indent=2) + "\n", args.out)


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cagnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("metrics", help="homophily and neighbor-identifiability metrics")
    p.add_argument("--bundle", action="append", required=True, help="bundle directory (repeatable)")
    p.add_argument("--out", help="JSON output path (default: stdout)")
    p.add_argument("--per-class", help="CSV of class_id, n_k, entropy")
    p.add_argument("--table", help="CSV row per bundle, usable as kendall --metrics")
    p.add_argument("--counts", action="store_true", help="use raw neighbor counts instead of distributions")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("synth", help="write a synthetic bundle")
    p.add_argument("--kind", choices=SYNTHETIC_KINDS, required=True)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--degree", type=int, default=10)
    p.add_argument("--feature-noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on one split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", type=int, default=0)
    p.add_argument("--checkpoint", help="write the selected parameters here")
    p.add_argument("--out")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("grid", cmd_grid, "grid search over all splits"),
                                 ("sweep-layers", cmd_sweep_layers, "accuracy versus depth"),
                                 ("noisy-edges", cmd_noisy_edges, "accuracy versus added random edges")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--bundle", required=True)
        p.add_argument("--grids", help="e.g. 'lr=0.01,0.05;weight_decay=5e-4;dropout=0,0.5'")
        p.add_argument("--splits", type=int, help="use only the first N splits")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out")
        _add_model_flags(p)
        _add_train_flags(p, single=False)
        if name == "sweep-layers":
            p.add_argument("--depths", type=_ints, default=(2, 4, 8, 16, 32))
        if name == "noisy-edges":
            p.add_argument("--ratios", type=_floats, default=(0.25, 0.5, 1.0, 2.0, 5.0))
        p.set_defaults(func=func)

    p = sub.add_parser("alpha-hist", help="dump gate values of a trained model")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV of node_id, layer, alpha")
    p.add_argument("--hist-out", help="CSV of layer, bin_lo, bin_hi, count")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_alpha_hist)

    p = sub.add_parser("spectral-check", help="linearized mixer vs polynomial filter on a random graph")
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--features", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_spectral_check)

    p = sub.add_parser("kendall", help="rank correlation of metrics against accuracy")
    p.add_argument("--results", required=True, help="CSV with dataset and accuracy columns")
    p.add_argument("--metrics", required=True, help="CSV with dataset, optional num_nodes, metric columns")
    p.add_argument("--accuracy-column", default="accuracy")
    p.add_argument("--negate", action="append", help="metric column to flip in sign (repeatable)")
    p.add_argument("--min-nodes", type=int, help="also report datasets with more than this many nodes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_kendall)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise ValidationError("--jobs must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        t0 = time.perf_counter()
        code = args.func(args) or 0
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
        return code
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure of an otherwise valid command
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
