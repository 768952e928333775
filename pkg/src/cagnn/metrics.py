"""Homophily ratios, neighbor-identifiability entropy and Kendall's tau.

The identifiability metric groups nodes by class, stacks each node's
neighbor-label histogram into a matrix per class, and takes the entropy of
that matrix's normalized singular-value spectrum divided by ``log C``.
Low values mean a class's neighbors follow a recognisable pattern, high
values mean they look random.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cagnn import _kernels
from cagnn.graph import Graph


@dataclass(frozen=True)
class NeighborDistMatrix:
    class_id: int
    rows: np.ndarray  # (n_k, C)


@dataclass(frozen=True)
class MetricReport:
    h_node: float
    h_edge: float
    h_neighbor: float
    per_class_entropy: np.ndarray
    class_sizes: np.ndarray

    def weighted_entropy(self) -> float:
        """Recompute the graph-level entropy from the per-class fields."""
        sizes = np.asarray(self.class_sizes, dtype=np.float64)
        return float(np.dot(sizes / sizes.sum(), self.per_class_entropy))

    def to_dict(self) -> dict:
        return {
            "h_node": self.h_node,
            "h_edge": self.h_edge,
            "h_neighbor": self.h_neighbor,
            "per_class_entropy": [float(x) for x in self.per_class_entropy],
            "class_sizes": [int(x) for x in self.class_sizes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            float(d["h_node"]), float(d["h_edge"]), float(d["h_neighbor"]),
            np.asarray(d["per_class_entropy"], dtype=np.float64),
            np.asarray(d["class_sizes"], dtype=np.int64),
        )


def _same_label(g: Graph, labels) -> np.ndarray:
    labels = np.asarray(labels)
    return labels[g.sources()] == labels[g.csr_targets]


def homophily_node(g: Graph, labels) -> float:
    """Average over all nodes of the fraction of same-label neighbors.

    Isolated nodes contribute 0 but still count in the denominator.
    """
    if g.num_nodes == 0:
        return 0.0
    same = _same_label(g, labels).astype(np.float64)
    deg = g.degrees
    per_node = np.zeros(g.num_nodes)
    np.add.at(per_node, g.sources(), same)
    nz = deg > 0
    per_node[nz] /= deg[nz]
    return float(per_node.sum() / g.num_nodes)


def homophily_edge(g: Graph, labels) -> float:
    """Fraction of undirected edges joining two nodes of the same label."""
    if g.undirected_edge_count == 0:
        raise ValueError("edge homophily is undefined for a graph without edges")
    # both stored directions agree, so the directed fraction equals the undirected one
    return float(_same_label(g, labels).mean())


def neighbor_label_counts(g: Graph, labels, num_classes: int) -> np.ndarray:
    """(N, C) matrix of neighbor-label counts."""
    labels = np.asarray(labels)
    counts = np.zeros((g.num_nodes, num_classes))
    np.add.at(counts, (g.sources(), labels[g.csr_targets]), 1.0)
    return counts


def neighbor_dist_matrix(g: Graph, labels, k: int, num_classes: int | None = None,
                         normalize: bool = True) -> NeighborDistMatrix:
    """Stack the neighbor-label histograms of every node with label ``k``.

    With ``normalize`` each row is divided by the node's degree (isolated
    nodes keep a zero row); otherwise raw counts are kept.
    """
    labels = np.asarray(labels)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    members = np.flatnonzero(labels == k)
    if len(members) == 0:
        raise ValueError(f"class {k} has no nodes")
    counts = neighbor_label_counts(g, labels, c)[members]
    if normalize:
        deg = counts.sum(axis=1, keepdims=True)
        counts = np.divide(counts, deg, out=np.zeros_like(counts), where=deg > 0)
    return NeighborDistMatrix(int(k), counts)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm drops below
    ``tol * ||a||_F``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    big = np.max(np.abs(a)) if a.size else 0.0
    if n < 2 or big == 0.0:
        return np.diag(a).copy()
    # work at unit scale so squared entries neither underflow nor overflow
    a /= big
    scale = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                cs = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * cs
                # A <- J^T A J on rows/cols p and q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = cs * ap - sn * aq
                a[:, q] = sn * ap + cs * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = cs * rp - sn * rq
                a[q, :] = sn * rp + cs * rq
                a[p, q] = a[q, p] = 0.0
    return np.diag(a) * big


def singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values of a tall matrix via the eigenvalues of its Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return np.zeros(m.shape[1] if m.ndim == 2 else 0)
    big = np.max(np.abs(m))
    if big == 0.0:
        return np.zeros(m.shape[1])
    m = m / big
    eig = jacobi_eigh(m.T @ m)
    # forming the Gram matrix costs ~eps * lambda_max of absolute accuracy;
    # anything below that is round-off and would be inflated by the sqrt
    floor = m.shape[1] * np.finfo(np.float64).eps * max(eig.max(), 0.0)
    eig[eig <= floor] = 0.0
    return np.sort(np.sqrt(eig))[::-1] * big


def spectral_entropy(sigma, num_classes: int) -> float:
    """``-sum p log p / log C`` of the normalized spectrum; zero spectrum gives 0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = sigma.sum()
    if total <= 0.0:
        return 0.0
    p = sigma / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / math.log(num_classes))


def class_neighbor_entropy(m: NeighborDistMatrix | np.ndarray) -> float:
    rows = m.rows if isinstance(m, NeighborDistMatrix) else np.asarray(m, dtype=np.float64)
    c = rows.shape[1]
    if c < 2:
        raise ValueError("entropy needs at least two classes")
    return spectral_entropy(singular_values(rows), c)


def neighbor_entropy(g: Graph, labels, num_classes: int, normalize: bool = True):
    """Class-size weighted mean of per-class entropies.

    Returns ``(h_neighbor, per_class_entropy, class_sizes)``.  Empty classes
    get weight zero and entropy 0.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    labels = np.asarray(labels)
    sizes = np.bincount(labels, minlength=num_classes)
    counts = neighbor_label_counts(g, labels, num_classes)
    if normalize:
        deg = counts.sum(axis=1, keepdims=True)
        counts = np.divide(counts, deg, out=np.zeros_like(counts), where=deg > 0)
    per_class = np.zeros(num_classes)
    for k in range(num_classes):
        if sizes[k]:
            per_class[k] = spectral_entropy(singular_values(counts[labels == k]), num_classes)
    h = float(np.dot(sizes / sizes.sum(), per_class))
    return h, per_class, sizes


def metric_report(g: Graph, labels, num_classes: int, normalize: bool = True) -> MetricReport:
    h, per_class, sizes = neighbor_entropy(g, labels, num_classes, normalize=normalize)
    h_edge = homophily_edge(g, labels) if g.undirected_edge_count else float("nan")
    return MetricReport(homophily_node(g, labels), h_edge, h, per_class, sizes)


# ------------------------------------------------------------------ Kendall

EXACT_MAX_N = 10


def _normal_two_sided(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def _tie_sums(v: np.ndarray):
    _, t = np.unique(v, return_counts=True)
    t = t.astype(np.float64)
    return (t * (t - 1)).sum(), (t * (t - 1) * (t - 2)).sum(), (t * (t - 1) * (2 * t + 5)).sum()


def kendall_tau(xs, ys, exact_max_n: int = EXACT_MAX_N):
    """Kendall's tau-b with a two-sided p-value.

    For ``n <= exact_max_n`` the p-value is the fraction of all ``n!``
    rearrangements of ``ys`` whose |S| is at least the observed |S|, where
    S = concordant - discordant.  Larger samples use the tie-corrected
    normal approximation of S.  Returns ``(tau, p_value)``.
    """
    x = np.ascontiguousarray(xs, dtype=np.float64)
    y = np.ascontiguousarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    n = len(x)
    if n < 2:
        raise ValueError("need at least two observations")
    conc, disc, tx, ty, txy = _kernels.kendall_counts(x, y)
    s = conc - disc
    denom = math.sqrt((conc + disc + tx) * (conc + disc + ty))
    if denom == 0:
        return float("nan"), float("nan")
    tau = max(-1.0, min(1.0, s / denom))

    if n <= exact_max_n:
        extreme, total = _kernels.kendall_permutation_tail(x, y, s)
        return tau, extreme / total

    vt1, vt2, vt0 = _tie_sums(x)
    vu1, vu2, vu0 = _tie_sums(y)
    var = ((n * (n - 1) * (2 * n + 5) - vt0 - vu0) / 18.0
           + vt1 * vu1 / (2.0 * n * (n - 1))
           + vt2 * vu2 / (9.0 * n * (n - 1) * (n - 2)))
    if var <= 0:
        return tau, float("nan")
    return tau, min(1.0, _normal_two_sided(s / math.sqrt(var)))
