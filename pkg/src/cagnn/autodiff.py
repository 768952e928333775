"""A small reverse-mode autodiff engine over dense 2-D float64 arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back into them.  ``backward``
walks the tape in reverse topological order, so shared subexpressions
accumulate their gradient contributions.

Sparse propagation goes through :class:`SparseMatrix` (constant CSR) or
:func:`edge_spmm` (CSR structure with differentiable edge values, used by
attention).  The inner loops live in :mod:`cagnn._kernels`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from cagnn import _kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"only 2-D tensors are supported, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.array(grad, dtype=np.float64).reshape(self.shape) + (
            self.grad if self.grad is not None else 0.0)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast")
        out.append(max(x, y))
    return tuple(out)


# ------------------------------------------------------------------ algebra

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def hadamard(a, b) -> Tensor:
    """Elementwise product; (N,1), (1,d) and (1,1) operands broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "hadamard")

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def broadcast_col(v, x) -> Tensor:
    """Scale row ``i`` of ``x`` by ``v[i]`` for an (N, 1) column ``v``."""
    v, x = as_tensor(v), as_tensor(x)
    if v.shape != (x.shape[0], 1):
        raise ShapeError(f"broadcast_col: column {v.shape} does not fit {x.shape}")
    return hadamard(v, x)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def concat_cols(*ts) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            _accum(t, g[:, lo:hi])

    return _make(np.concatenate([t.data for t in ts], axis=1), ts, back)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] outside {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accum(a, full)

    return _make(a.data[:, start:stop].copy(), (a,), back)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: _accum(a, np.full_like(a.data, g[0, 0])))


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), back)


# ------------------------------------------------------------------- sparse

@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Constant CSR matrix used as a propagation operator."""

    offsets: np.ndarray
    targets: np.ndarray
    values: np.ndarray
    shape: tuple = field(default=None)

    def __post_init__(self):
        n = len(self.offsets) - 1
        if self.shape is None:
            object.__setattr__(self, "shape", (n, n))
        if len(self.values) != len(self.targets):
            raise ShapeError("values and targets differ in length")
        for arr in (self.offsets, self.targets, self.values):
            arr.flags.writeable = False

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(np.arange(n + 1, dtype=np.int64), np.arange(n, dtype=np.int64), np.ones(n))

    @classmethod
    def from_dense(cls, m) -> "SparseMatrix":
        m = np.asarray(m, dtype=np.float64)
        rows, cols = np.nonzero(m)
        offsets = np.zeros(m.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=m.shape[0]), out=offsets[1:])
        return cls(offsets, cols.astype(np.int64), m[rows, cols].copy(), m.shape)

    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0]), np.diff(self.offsets))

    def to_dense(self) -> np.ndarray:
        d = np.zeros(self.shape)
        np.add.at(d, (self.rows(), self.targets), self.values)
        return d

    def matvec_dense(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy product, no tape."""
        return _kernels.spmm(self.offsets, self.targets, self.values, np.ascontiguousarray(x, dtype=np.float64))


def spmm(s: SparseMatrix, x) -> Tensor:
    x = as_tensor(x)
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: sparse {s.shape} @ {x.shape}")
    out = _kernels.spmm(s.offsets, s.targets, s.values, np.ascontiguousarray(x.data))

    def back(g):
        _accum(x, _kernels.spmm_t(s.offsets, s.targets, s.values, np.ascontiguousarray(g), x.shape[0]))

    return _make(out, (x,), back)


def edge_spmm(offsets, targets, values, x) -> Tensor:
    """Sparse product whose per-edge ``values`` (E, 1) are differentiable."""
    values, x = as_tensor(values), as_tensor(x)
    if values.shape != (len(targets), 1):
        raise ShapeError(f"edge_spmm: values {values.shape} for {len(targets)} edges")
    vals = np.ascontiguousarray(values.data[:, 0])
    xd = np.ascontiguousarray(x.data)
    out = _kernels.spmm(offsets, targets, vals, xd)

    def back(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, _kernels.spmm_t(offsets, targets, vals, g, x.shape[0]))
        if values.requires_grad:
            _accum(values, _kernels.sddmm(offsets, targets, g, xd)[:, None])

    return _make(out, (values, x), back)


def segment_softmax(offsets, scores) -> Tensor:
    """Softmax of (E, 1) edge scores within each CSR row."""
    scores = as_tensor(scores)
    probs = _kernels.segment_softmax(offsets, np.ascontiguousarray(scores.data[:, 0]))

    def back(g):
        _accum(scores, _kernels.segment_softmax_backward(
            offsets, probs, np.ascontiguousarray(g[:, 0]))[:, None])

    return _make(probs[:, None], (scores,), back)


# -------------------------------------------------------------- activations

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible so divergence is not silently masked
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: _accum(x, g * factor))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)
    return _make(y, (x,), lambda g: _accum(x, g - sm * g.sum(axis=1, keepdims=True)))


def l2_normalize_rows(x) -> Tensor:
    """Scale every row to unit Euclidean norm; exact-zero rows stay zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1.0)
    y = np.where(nz, x.data / safe, 0.0)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, np.where(nz, (g - y * dot) / safe, 0.0))

    return _make(y, (x,), back)


def layer_norm_rows(x, eps: float = 1e-5) -> Tensor:
    """Standardize each row to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).sum(axis=1, keepdims=True) / d
        _accum(x, inv * (g - gm - y * gy))

    return _make(y, (x,), back)


def dropout(x, p: float, training: bool, seed) -> Tensor:
    """Inverted dropout; the identity when not training or ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: _accum(x, g * mask))


def masked_cross_entropy(logits, labels, mask) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over the rows in ``mask``."""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=np.int64)
    if len(mask) == 0:
        raise ValueError("cross-entropy over an empty mask")
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_rows(logits)
    picked = logp.data[mask, labels[mask]]
    loss = np.array([[-picked.mean()]])

    def back(g):
        full = np.zeros_like(logp.data)
        full[mask, labels[mask]] = -g[0, 0] / len(mask)
        _accum(logp, full)

    return _make(loss, (logp,), back)


# -------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state: AdamState) -> None:
    """One Adam update in place.

    Weight decay is added to the gradient as an L2 penalty before the
    moment estimates (not the decoupled AdamW form).  Parameters without a
    gradient are treated as having a zero one.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
