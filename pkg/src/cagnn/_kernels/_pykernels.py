"""Pure numpy twins of the compiled kernels in ``_ckernels.pyx``."""
import itertools

import numpy as np


def _row_ids(offsets):
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def _segment_sum(offsets, contrib, n_rows):
    # reduceat misbehaves on empty segments, so only reduce the non-empty ones
    out = np.zeros((n_rows,) + contrib.shape[1:], dtype=np.float64)
    starts = offsets[:-1]
    nonempty = np.diff(offsets) > 0
    if nonempty.any():
        out[nonempty] = np.add.reduceat(contrib, starts[nonempty], axis=0)
    return out


def spmm(offsets, targets, values, x):
    contrib = values[:, None] * x[targets]
    return _segment_sum(offsets, contrib, len(offsets) - 1)


def spmm_t(offsets, targets, values, g, n_out):
    rows = _row_ids(offsets)
    out = np.zeros((n_out, g.shape[1]), dtype=np.float64)
    np.add.at(out, targets, values[:, None] * g[rows])
    return out


def sddmm(offsets, targets, a, b):
    rows = _row_ids(offsets)
    return np.einsum("ij,ij->i", a[rows], b[targets])


def segment_softmax(offsets, scores):
    n = len(offsets) - 1
    out = np.zeros_like(scores, dtype=np.float64)
    if len(scores) == 0:
        return out
    nonempty = np.diff(offsets) > 0
    row_max = np.full(n, -np.inf)
    row_max[nonempty] = np.maximum.reduceat(scores, offsets[:-1][nonempty])
    rows = _row_ids(offsets)
    ex = np.exp(scores - row_max[rows])
    z = _segment_sum(offsets, ex, n)
    return ex / z[rows]


def segment_softmax_backward(offsets, probs, grad):
    rows = _row_ids(offsets)
    dot = _segment_sum(offsets, probs * grad, len(offsets) - 1)
    return probs * (grad - dot[rows])


def kendall_counts(x, y):
    iu, ju = np.triu_indices(len(x), k=1)
    sx = np.sign(x[iu] - x[ju])
    sy = np.sign(y[iu] - y[ju])
    both = (sx == 0) & (sy == 0)
    tx = (sx == 0) & (sy != 0)
    ty = (sy == 0) & (sx != 0)
    prod = sx * sy
    return (int((prod > 0).sum()), int((prod < 0).sum()),
            int(tx.sum()), int(ty.sum()), int(both.sum()))


def kendall_permutation_tail(x, y, s_obs, chunk=50_000):
    n = len(x)
    iu, ju = np.triu_indices(n, k=1)
    sx = np.sign(x[iu] - x[ju]).astype(np.int64)
    thr = abs(int(s_obs))
    extreme = total = 0
    perms = itertools.permutations(range(n))
    while True:
        block = np.array(list(itertools.islice(perms, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        yp = y[block]
        s = (np.sign(yp[:, iu] - yp[:, ju]).astype(np.int64) * sx).sum(axis=1)
        extreme += int((np.abs(s) >= thr).sum())
        total += len(block)
    return extreme, total
