import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cagnn import _kernels
from cagnn._kernels import get_backend

BACKENDS = _kernels.available_backends()


def random_csr(rng, n, m, density=0.3):
    dense = (rng.random((n, m)) < density) * rng.standard_normal((n, m))
    rows, cols = np.nonzero(dense)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=offsets[1:])
    return offsets, cols.astype(np.int64), dense[rows, cols].copy(), dense


@pytest.mark.parametrize("name", BACKENDS)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12), k=st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_sparse_kernels_match_dense(name, seed, n, k):
    K = get_backend(name)
    rng = np.random.default_rng(seed)
    off, tgt, val, dense = random_csr(rng, n, n)
    x = rng.standard_normal((n, k))
    g = rng.standard_normal((n, k))
    np.testing.assert_allclose(K.spmm(off, tgt, val, x), dense @ x, atol=1e-12)
    np.testing.assert_allclose(K.spmm_t(off, tgt, val, g, n), dense.T @ g, atol=1e-12)
    rows = np.repeat(np.arange(n), np.diff(off))
    np.testing.assert_allclose(K.sddmm(off, tgt, g, x), (g[rows] * x[tgt]).sum(axis=1), atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_segment_softmax_rows_sum_to_one(name, rng):
    K = get_backend(name)
    off, tgt, _, _ = random_csr(rng, 10, 10, density=0.5)
    scores = rng.standard_normal(len(tgt)) * 30
    p = K.segment_softmax(off, scores)
    for i in range(10):
        seg = p[off[i]:off[i + 1]]
        if len(seg):
            assert seg.sum() == pytest.approx(1.0, abs=1e-12)
            ref = np.exp(scores[off[i]:off[i + 1]] - scores[off[i]:off[i + 1]].max())
            np.testing.assert_allclose(seg, ref / ref.sum(), rtol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 30))
@settings(max_examples=50, deadline=None)
def test_kendall_counts_match_pairwise_loop(name, seed, n):
    K = get_backend(name)
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5, n).astype(float)
    y = rng.integers(0, 5, n).astype(float)
    want = [0, 0, 0, 0, 0]
    for i, j in itertools.combinations(range(n), 2):
        sx, sy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        if sx == 0 and sy == 0:
            want[4] += 1
        elif sx == 0:
            want[2] += 1
        elif sy == 0:
            want[3] += 1
        elif sx == sy:
            want[0] += 1
        else:
            want[1] += 1
    assert tuple(K.kendall_counts(x, y)) == tuple(want)


def test_backends_agree_on_permutation_tail(rng):
    x = rng.random(7)
    y = np.round(rng.random(7), 1)
    results = {b: get_backend(b).kendall_permutation_tail(x, y, 5) for b in BACKENDS}
    assert len(set(results.values())) == 1
    assert next(iter(results.values()))[1] == 5040


def test_use_backend_switches_module_functions():
    before = _kernels.BACKEND
    try:
        _kernels.use_backend("python")
        assert _kernels.spmm is get_backend("python").spmm
    finally:
        _kernels.use_backend(before)
    with pytest.raises(ValueError):
        _kernels.use_backend("fortran")
