"""Central finite-difference gradient checking for the autodiff tape."""
import numpy as np

from cagnn import autodiff as ad

STEP = 1e-3


def relative_error(analytic, numeric) -> float:
    """Max-abs difference scaled by the larger max-abs gradient (floor 1e-8)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check(fn, arrays, seed=0, step=STEP):
    """Max relative error over all inputs of ``fn``.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are contracted with a
    fixed random matrix so one backward pass yields a vector-Jacobian product.
    """
    rng = np.random.default_rng(seed + 1000)
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)

    def scalar(vals):
        with ad.no_grad():
            return float((fn(*[ad.Tensor(v) for v in vals]).data * proj).sum())

    out.backward(proj)
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        base = [a.copy() for a in arrays]
        for idx in np.ndindex(*t.shape):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[i][idx] += step
            minus[i][idx] -= step
            numeric[idx] = (scalar(plus) - scalar(minus)) / (2 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_kink(a):
    return np.sign(a) * (np.abs(a) + 0.05)


def _csr(rng, n):
    """Random CSR pattern where every row has at least one entry."""
    dense = rng.random((n, n)) < 0.4
    dense[np.arange(n), rng.integers(0, n, n)] = True
    rows, cols = np.nonzero(dense)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=offsets[1:])
    return offsets, cols.astype(np.int64)


def op_cases(seed):
    """(name, fn, input arrays) for every differentiable op, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    off, tgt = _csr(rng, 5)
    sp = ad.SparseMatrix(off, tgt, r(len(tgt)))
    labels = rng.integers(0, 3, 6)
    mask = np.array([0, 2, 3, 5])
    idx = np.array([3, 0, 3, 1])
    return [
        ("matmul", ad.matmul, [r((5, 4)), r((4, 3))]),
        ("add", ad.add, [r((5, 3)), r((1, 3))]),
        ("sub", ad.sub, [r((5, 3)), r((5, 1))]),
        ("hadamard", ad.hadamard, [r((5, 3)), r((5, 3))]),
        ("broadcast_col", ad.broadcast_col, [r((5, 1)), r((5, 3))]),
        ("scale", lambda a: ad.scale(a, -1.7), [r((4, 3))]),
        ("concat_cols", ad.concat_cols, [r((4, 2)), r((4, 3)), r((4, 1))]),
        ("slice_cols", lambda a: ad.slice_cols(a, 1, 4), [r((4, 5))]),
        ("sum_all", ad.sum_all, [r((3, 4))]),
        ("gather_rows", lambda a: ad.gather_rows(a, idx), [r((4, 3))]),
        ("spmm", lambda x: ad.spmm(sp, x), [r((5, 3))]),
        ("edge_spmm", lambda v, x: ad.edge_spmm(off, tgt, v, x), [r((len(tgt), 1)), r((5, 3))]),
        ("segment_softmax", lambda s: ad.segment_softmax(off, s), [r((len(tgt), 1))]),
        ("relu", ad.relu, [_away_from_kink(r((4, 3)))]),
        ("leaky_relu", lambda a: ad.leaky_relu(a, 0.2), [_away_from_kink(r((4, 3)))]),
        ("sigmoid", ad.sigmoid, [3 * r((4, 3))]),
        ("log_softmax_rows", ad.log_softmax_rows, [2 * r((4, 5))]),
        ("l2_normalize_rows", ad.l2_normalize_rows, [r((4, 3)) + 0.5]),
        ("layer_norm_rows", ad.layer_norm_rows, [r((4, 5))]),
        ("dropout", lambda a: ad.dropout(a, 0.4, True, seed=7), [r((4, 3))]),
        ("masked_cross_entropy", lambda z: ad.masked_cross_entropy(z, labels, mask), [r((6, 3))]),
    ]
