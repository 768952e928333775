"""Graph structure, dataset bundles, synthetic generators and edge noise.

A bundle is a directory of plain-text files::

    meta.json      {"name", "num_nodes", "num_classes", "feature_dim"}
    edges.tsv      one "u<TAB>v" per line, 0-based
    features.csv   N rows of m comma-separated reals
    labels.txt     N lines, one class id each
    splits.json    list of {"train": [...], "val": [...], "test": [...]}

Edges are symmetrized and deduplicated on load and self-loops dropped, so
every :class:`Graph` is simple and undirected.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class BundleError(ValueError):
    """A dataset bundle is missing a file or contains invalid data."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph in CSR form.

    Each undirected edge is stored in both directions; neighbor lists are
    sorted ascending and duplicate-free.
    """

    num_nodes: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray

    def __post_init__(self):
        for arr in (self.csr_offsets, self.csr_targets):
            arr.flags.writeable = False

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "Graph":
        """Build from an iterable/array of (u, v) pairs.

        Pairs are symmetrized, duplicates collapsed and self-loops dropped.
        """
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise ValueError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]], axis=0)
        if len(both):
            keys = np.unique(both[:, 0] * num_nodes + both[:, 1])
            src, dst = keys // num_nodes, keys % num_nodes
        else:
            src = dst = np.empty(0, dtype=np.int64)
        counts = np.bincount(src, minlength=num_nodes)
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(num_nodes, offsets, dst.astype(np.int64))

    @property
    def undirected_edge_count(self) -> int:
        return len(self.csr_targets) // 2

    @property
    def directed_edge_count(self) -> int:
        return len(self.csr_targets)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[v]:self.csr_offsets[v + 1]]

    def sources(self) -> np.ndarray:
        """Row index of every stored CSR entry."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with u < v."""
        src = self.sources()
        keep = src < self.csr_targets
        return np.stack([src[keep], self.csr_targets[keep]], axis=1)

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.sources(), self.csr_targets] = 1.0
        return a

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel nodes so that old node ``i`` becomes ``perm[i]``."""
        e = self.edge_array()
        return Graph.from_edges(self.num_nodes, perm[e])

    def check(self) -> None:
        """Raise AssertionError if any structural invariant is violated."""
        n = self.num_nodes
        off, tgt = self.csr_offsets, self.csr_targets
        assert len(off) == n + 1 and off[0] == 0 and off[-1] == len(tgt)
        src = self.sources()
        assert not np.any(src == tgt), "self-loop stored"
        for v in range(n):
            nb = self.neighbors(v)
            assert np.all(np.diff(nb) > 0), f"neighbor list of {v} unsorted or duplicated"
        fwd = set(zip(src.tolist(), tgt.tolist()))
        assert all((v, u) in fwd for u, v in fwd), "adjacency not symmetric"

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.csr_offsets, other.csr_offsets)
                and np.array_equal(self.csr_targets, other.csr_targets))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class NodeTable:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels disagree on node count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        self.features.flags.writeable = False
        self.labels.flags.writeable = False


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class SplitSet:
    splits: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.splits)

    def __getitem__(self, i) -> Split:
        return self.splits[i]

    def __iter__(self):
        return iter(self.splits)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    graph: Graph
    nodes: NodeTable
    splits: SplitSet
    name: str = "unnamed"

    def __post_init__(self):
        n = self.graph.num_nodes
        if len(self.nodes.labels) != n:
            raise ValueError(f"graph has {n} nodes but node table has {len(self.nodes.labels)}")
        for i, sp in enumerate(self.splits):
            parts = (sp.train, sp.val, sp.test)
            for p in parts:
                if len(p) and (p.min() < 0 or p.max() >= n):
                    raise ValueError(f"split {i} index out of range")
            total = sum(len(p) for p in parts)
            if len(np.unique(np.concatenate(parts))) != total:
                raise ValueError(f"split {i}: train/val/test overlap")

    @property
    def labels(self):
        return self.nodes.labels

    @property
    def features(self):
        return self.nodes.features

    @property
    def num_classes(self):
        return self.nodes.num_classes

    def with_graph(self, graph: Graph) -> "DatasetBundle":
        return DatasetBundle(graph, self.nodes, self.splits, self.name)


# ---------------------------------------------------------------- bundle I/O

def _need(path: Path, name: str) -> Path:
    p = path / name
    if not p.is_file():
        raise BundleError(f"{p}: missing file")
    return p


def load_bundle(path) -> DatasetBundle:
    """Read and validate a bundle directory.

    Errors name the offending file and, where relevant, the line.
    """
    path = Path(path)
    if not path.is_dir():
        raise BundleError(f"{path}: not a directory")
    meta_path = _need(path, "meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        n = int(meta["num_nodes"])
        num_classes = int(meta["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise BundleError(f"{meta_path}: malformed meta ({exc})") from None
    name = str(meta.get("name", path.name))

    labels_path = _need(path, "labels.txt")
    labels = []
    for lineno, line in enumerate(labels_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            y = int(line)
        except ValueError:
            raise BundleError(f"{labels_path}:{lineno}: malformed row {line!r}") from None
        if not 0 <= y < num_classes:
            raise BundleError(f"{labels_path}:{lineno}: label out of range ({y} not in [0, {num_classes}))")
        labels.append(y)
    if len(labels) != n:
        raise BundleError(f"{labels_path}: expected {n} labels, found {len(labels)}")

    feat_path = _need(path, "features.csv")
    rows = []
    for lineno, line in enumerate(feat_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(t) for t in line.split(",")])
        except ValueError:
            raise BundleError(f"{feat_path}:{lineno}: malformed row") from None
        if len(rows[-1]) != len(rows[0]):
            raise BundleError(f"{feat_path}:{lineno}: expected {len(rows[0])} columns, found {len(rows[-1])}")
    if len(rows) != n:
        raise BundleError(f"{feat_path}: expected {n} rows, found {len(rows)}")
    features = np.array(rows, dtype=np.float64).reshape(n, -1)
    if "feature_dim" in meta and features.shape[1] != int(meta["feature_dim"]):
        raise BundleError(f"{feat_path}: feature_dim {meta['feature_dim']} in meta, {features.shape[1]} in file")

    edges_path = _need(path, "edges.tsv")
    edges = []
    for lineno, line in enumerate(edges_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            u, v = int(parts[0]), int(parts[1])
            if len(parts) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise BundleError(f"{edges_path}:{lineno}: malformed row {line!r}") from None
        if not (0 <= u < n and 0 <= v < n):
            raise BundleError(f"{edges_path}:{lineno}: dangling edge endpoint ({u}, {v})")
        edges.append((u, v))
    graph = Graph.from_edges(n, edges)

    splits_path = _need(path, "splits.json")
    try:
        raw = json.loads(splits_path.read_text(encoding="utf-8"))
        splits = tuple(
            Split(*(np.asarray(s[k], dtype=np.int64) for k in ("train", "val", "test")))
            for s in raw
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise BundleError(f"{splits_path}: malformed splits ({exc})") from None

    try:
        nodes = NodeTable(features, np.asarray(labels, dtype=np.int64), num_classes)
        return DatasetBundle(graph, nodes, SplitSet(splits), name)
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from None


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_bundle(bundle: DatasetBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": bundle.name,
        "num_nodes": bundle.graph.num_nodes,
        "num_classes": bundle.num_classes,
        "feature_dim": int(bundle.features.shape[1]),
    }
    atomic_write_text(path / "meta.json", json.dumps(meta, indent=2) + "\n")
    atomic_write_text(path / "edges.tsv", "".join(f"{u}\t{v}\n" for u, v in bundle.graph.edge_array()))
    atomic_write_text(
        path / "features.csv",
        "".join(",".join(repr(float(x)) for x in row) + "\n" for row in bundle.features),
    )
    atomic_write_text(path / "labels.txt", "".join(f"{int(y)}\n" for y in bundle.labels))
    splits = [{k: getattr(s, k).tolist() for k in ("train", "val", "test")} for s in bundle.splits]
    atomic_write_text(path / "splits.json", json.dumps(splits) + "\n")


# -------------------------------------------------------------- perturbation

def add_random_edges(g: Graph, ratio: float, seed: int) -> Graph:
    """Return a copy of ``g`` with ``floor(ratio * |E|)`` new random edges.

    New edges are sampled uniformly without replacement from the pairs that
    are neither edges nor self-loops.
    """
    if not 0 <= ratio <= 5:
        raise ValueError(f"ratio must lie in [0, 5], got {ratio}")
    n = g.num_nodes
    want = int(np.floor(ratio * g.undirected_edge_count))
    if want == 0:
        return g
    available = n * (n - 1) // 2 - g.undirected_edge_count
    if want > available:
        raise ValueError(f"cannot add {want} edges: only {available} non-edges remain")
    existing = g.edge_array()
    taken = set((existing[:, 0] * n + existing[:, 1]).tolist())
    rng = np.random.default_rng(seed)
    added = []
    # dense fallback keeps rejection sampling from stalling near saturation
    if want > available // 2:
        iu, ju = np.triu_indices(n, k=1)
        keys = iu * n + ju
        free = keys[~np.isin(keys, np.fromiter(taken, dtype=np.int64, count=len(taken)))]
        added = rng.choice(free, size=want, replace=False).tolist()
    else:
        new = set()
        while len(new) < want:
            u, v = rng.integers(0, n, size=2).tolist()
            if u == v:
                continue
            key = min(u, v) * n + max(u, v)
            if key in taken or key in new:
                continue
            new.add(key)
            added.append(key)
    keys = np.asarray(added, dtype=np.int64)
    extra = np.stack([keys // n, keys % n], axis=1)
    return Graph.from_edges(n, np.concatenate([existing, extra], axis=0))


# ---------------------------------------------------------------- synthetic

SYNTHETIC_KINDS = ("pure-homophily", "bipartite", "random-neighbor", "patterned")


def patterned_mixing(num_classes: int) -> np.ndarray:
    """Symmetric doubly-stochastic class mixing matrix with distinct rows.

    Row ``k`` is the cyclic shift of (0.7, 0.2, 0.1, 0, ...) so that the
    endpoint counts of an undirected graph can honour every row at once.
    """
    c = num_classes
    if c < 3:
        raise ValueError("patterned mixing needs at least 3 classes")
    base = np.zeros(c)
    base[:3] = (0.7, 0.2, 0.1)
    # M[k, j] = base[(j + k) mod c] is symmetric and each row/column is a permutation of base
    idx = (np.arange(c)[:, None] + np.arange(c)[None, :]) % c
    return base[idx]


def _mixing_for(kind: str, c: int) -> np.ndarray:
    if kind == "pure-homophily":
        return np.eye(c)
    if kind == "bipartite":
        if c != 2:
            raise ValueError("bipartite graphs have exactly 2 classes")
        return np.array([[0.0, 1.0], [1.0, 0.0]])
    if kind == "random-neighbor":
        return np.full((c, c), 1.0 / c)
    if kind == "patterned":
        return patterned_mixing(c)
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")


def stratified_split(labels: np.ndarray, fractions=(0.48, 0.32, 0.20), seed: int = 0) -> Split:
    """Per-class shuffled train/val/test split; remainder goes to test."""
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return Split(*(np.sort(np.concatenate(p)).astype(np.int64) for p in parts))


def make_synthetic(kind: str, n_per_class: int, num_classes: int, degree: int,
                   seed: int, feature_noise: float = 0.1) -> DatasetBundle:
    """Generate a labelled graph with a prescribed class-mixing pattern.

    Every node gets ``degree`` edge stubs.  Each stub of a class-``k`` node
    draws its target class independently from row ``k`` of the mixing
    matrix, and stubs of the (k, j) and (j, k) blocks are matched at
    random.  Self-loops, duplicate pairs and unmatched leftover stubs are
    discarded, so realized degrees can fall short of ``degree``.

    Features are ``one_hot(label) + N(0, feature_noise**2)``; one stratified
    48/32/20 split is attached.
    """
    c = num_classes
    n = n_per_class * c
    if n_per_class < 1 or c < 2:
        raise ValueError("need n_per_class >= 1 and num_classes >= 2")
    if not 1 <= degree < n:
        raise ValueError(f"degree must lie in [1, {n - 1}], got {degree}")
    if feature_noise < 0:
        raise ValueError("feature_noise must be non-negative")
    mix = _mixing_for(kind, c)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(c), n_per_class)
    members = [np.flatnonzero(labels == k) for k in range(c)]

    # stubs[k][j]: nodes of class k (with multiplicity) wanting a class-j neighbor
    stubs = [[None] * c for _ in range(c)]
    for k in range(c):
        draws = rng.multinomial(degree, mix[k], size=len(members[k]))
        for j in range(c):
            stubs[k][j] = np.repeat(members[k], draws[:, j])

    edges = []
    for k in range(c):
        for j in range(k, c):
            a = rng.permutation(stubs[k][j])
            if j == k:
                m = len(a) // 2
                edges.append(np.stack([a[:m], a[m:2 * m]], axis=1))
            else:
                b = rng.permutation(stubs[j][k])
                m = min(len(a), len(b))
                edges.append(np.stack([a[:m], b[:m]], axis=1))
    graph = Graph.from_edges(n, np.concatenate(edges, axis=0))

    features = np.eye(c)[labels] + feature_noise * rng.standard_normal((n, c))
    split = stratified_split(labels, seed=seed)
    nodes = NodeTable(features, labels.astype(np.int64), c)
    return DatasetBundle(graph, nodes, SplitSet((split,)), f"synthetic-{kind}")
