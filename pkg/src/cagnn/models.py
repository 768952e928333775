"""Graph convolution kernels, the conv-agnostic GNN and its baselines.

A CAGNN keeps two node representations.  ``S`` (discriminative) starts as
the encoded features; ``H`` (aggregation) is pushed through a stack of
graph convolutions.  After every convolution a gate shared by all layers
looks at ``[S || H]`` and produces a per-node weight ``alpha`` in (0, 1),
and ``S`` moves to ``Norm((1 - alpha) * S + alpha * H)``.  The decoder
reads only the final ``S``.

``mode="vanilla"`` gives the plain stacked kernel (or an MLP) used as the
baseline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cagnn import autodiff as ad
from cagnn.autodiff import SparseMatrix, Tensor
from cagnn.graph import Graph, atomic_write_text

KERNELS = ("gcn", "gin", "gat", "mlp")
MODES = ("cagnn", "vanilla")
MIXERS = ("linear", "add", "concat", "global", "unshared", "mlp2", "mlp3")
NORMS = ("l2", "none", "layernorm")
GATED_MIXERS = ("linear", "global", "unshared", "mlp2", "mlp3")


@dataclass(frozen=True)
class ModelConfig:
    kernel: str = "gcn"
    mode: str = "cagnn"
    layers: int = 2
    hidden: int = 64
    mixer: str = "linear"
    norm: str = "l2"
    dropout: float = 0.5
    gat_heads: int = 1
    gin_mlp_hidden: int = 0
    # ReLU after each graph convolution; None means "off in cagnn, on in vanilla"
    gc_activation: bool | None = None

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mixer not in MIXERS:
            raise ValueError(f"unknown mixer {self.mixer!r}; expected one of {MIXERS}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.gat_heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.kernel == "mlp" and self.mode == "cagnn":
            raise ValueError("the mlp kernel has no graph convolution; use mode='vanilla'")

    @property
    def activation(self) -> bool:
        if self.gc_activation is None:
            return self.mode == "vanilla"
        return self.gc_activation

    @property
    def gin_hidden(self) -> int:
        return self.gin_mlp_hidden or self.hidden

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)


# ------------------------------------------------------------- propagation

def _csr_from_pairs(n, rows, cols, vals):
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=offsets[1:])
    return SparseMatrix(offsets, cols.astype(np.int64), vals.astype(np.float64))


def with_self_loops(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    n = g.num_nodes
    loops = np.arange(n, dtype=np.int64)
    return (np.concatenate([g.sources(), loops]), np.concatenate([g.csr_targets, loops]))


def build_propagation(g: Graph, kernel: str) -> SparseMatrix | None:
    """Constant sparse operator for ``kernel``.

    gcn: ``D~^-1/2 (A + I) D~^-1/2``; gin: the plain adjacency; gat: the
    structure of ``A + I`` with unit placeholder values (attention fills
    them per forward pass); mlp: None.
    """
    n = g.num_nodes
    if kernel == "gcn":
        rows, cols = with_self_loops(g)
        dt = (g.degrees + 1).astype(np.float64)
        return _csr_from_pairs(n, rows, cols, 1.0 / np.sqrt(dt[rows] * dt[cols]))
    if kernel == "gin":
        return SparseMatrix(g.csr_offsets.copy(), g.csr_targets.copy(), np.ones(len(g.csr_targets)))
    if kernel == "gat":
        rows, cols = with_self_loops(g)
        return _csr_from_pairs(n, rows, cols, np.ones(len(rows)))
    if kernel == "mlp":
        return None
    raise ValueError(f"unknown kernel {kernel!r}")


def sym_normalized_adjacency(g: Graph) -> SparseMatrix:
    """``D^-1/2 A D^-1/2`` without self-loops; isolated nodes get empty rows."""
    deg = g.degrees.astype(np.float64)
    src = g.sources()
    vals = 1.0 / np.sqrt(deg[src] * deg[g.csr_targets])
    return SparseMatrix(g.csr_offsets.copy(), g.csr_targets.copy(), vals)


# ------------------------------------------------------------------ kernels

def gcn_layer(P: SparseMatrix, H, W, activation: bool = True) -> Tensor:
    # multiply by the narrower side first; both orders give P H W
    if W.shape[1] < W.shape[0]:
        out = ad.spmm(P, ad.matmul(H, W))
    else:
        out = ad.matmul(ad.spmm(P, H), W)
    return ad.relu(out) if activation else out


def gin_layer(A: SparseMatrix, H, mlp_params, eps, activation: bool = False) -> Tensor:
    """``MLP((1 + eps) * H + A H)`` with a linear-ReLU-linear MLP."""
    W1, b1, W2, b2 = mlp_params
    agg = ad.add(ad.add(H, ad.hadamard(eps, H)), ad.spmm(A, H))
    out = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(agg, W1), b1)), W2), b2)
    return ad.relu(out) if activation else out


def gat_layer(S: SparseMatrix, H, W, a_src, a_dst, activation: bool = True,
              slope: float = 0.2, return_attention: bool = False):
    """Single-head attention over each node's neighbors plus itself.

    ``S`` is the self-looped structure from ``build_propagation(g, 'gat')``.
    Edge (i, j) scores ``LeakyReLU(a_src . Wh_i + a_dst . Wh_j)`` and is
    softmax-normalized over row ``i``.
    """
    Wh = ad.matmul(H, W)
    rows = S.rows()
    score = ad.add(ad.gather_rows(ad.matmul(Wh, a_src), rows),
                   ad.gather_rows(ad.matmul(Wh, a_dst), S.targets))
    att = ad.segment_softmax(S.offsets, ad.leaky_relu(score, slope))
    out = ad.edge_spmm(S.offsets, S.targets, att, Wh)
    if activation:
        out = ad.relu(out)
    return (out, att) if return_attention else out


# -------------------------------------------------------------------- model

def glorot(rng, fan_in, fan_out, name):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class ForwardTrace:
    alphas: list            # per layer (N, 1) arrays; empty for ungated variants
    logits: Tensor          # log-probabilities Z
    s_final: Tensor
    s_layers: list = field(default_factory=list)
    h_layers: list = field(default_factory=list)


class AlphaRangeError(AssertionError):
    pass


class CagnnModel:
    """Parameters plus forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, num_features: int, num_classes: int, seed: int = 0):
        self.config = config
        self.num_features = int(num_features)
        self.num_classes = int(num_classes)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._dropout_rng = np.random.default_rng([seed, 1])
        if config.mode == "cagnn":
            self._init_cagnn(rng)
        else:
            self._init_vanilla(rng)

    # ---- construction

    def _add(self, t: Tensor):
        self.params[t.name] = t

    def _linear(self, rng, prefix, fan_in, fan_out, bias=True):
        self._add(glorot(rng, fan_in, fan_out, f"{prefix}.W"))
        if bias:
            self._add(zeros((1, fan_out), f"{prefix}.b"))

    def _init_kernel(self, rng, prefix, d_in, d_out):
        k = self.config.kernel
        if k == "gcn":
            self._add(glorot(rng, d_in, d_out, f"{prefix}.W"))
        elif k == "gat":
            self._add(glorot(rng, d_in, d_out, f"{prefix}.W"))
            self._add(glorot(rng, d_out, 1, f"{prefix}.a_src"))
            self._add(glorot(rng, d_out, 1, f"{prefix}.a_dst"))
        elif k == "gin":
            hid = self.config.gin_hidden
            self._linear(rng, f"{prefix}.mlp1", d_in, hid)
            self._linear(rng, f"{prefix}.mlp2", hid, d_out)
            self._add(zeros((1, 1), f"{prefix}.eps"))
        elif k == "mlp":
            self._linear(rng, prefix, d_in, d_out)

    def _init_norm(self, prefix, width):
        if self.config.norm == "layernorm":
            self._add(Tensor(np.ones((1, width)), requires_grad=True, name=f"{prefix}.gamma"))
            self._add(zeros((1, width), f"{prefix}.beta"))

    def _init_cagnn(self, rng):
        cfg = self.config
        d, L = cfg.hidden, cfg.layers
        self._linear(rng, "enc", self.num_features, d)
        self._init_norm("norm.enc", d)
        for l in range(1, L + 1):
            self._init_kernel(rng, f"gc{l}", d, d)
            self._init_norm(f"norm.gc{l}", d)
            if cfg.mixer != "concat":
                self._init_norm(f"norm.mix{l}", d)
        m = cfg.mixer
        if m == "linear":
            self._linear(rng, "mix", 2 * d, 1)
        elif m == "unshared":
            for l in range(1, L + 1):
                self._linear(rng, f"mix{l}", 2 * d, 1)
        elif m == "global":
            for l in range(1, L + 1):
                self._add(zeros((1, 1), f"mix{l}.logit"))
        elif m in ("mlp2", "mlp3"):
            depth = 2 if m == "mlp2" else 3
            widths = [2 * d] * depth + [1]
            for i in range(depth):
                self._linear(rng, f"mix.l{i + 1}", widths[i], widths[i + 1])
        elif m == "concat":
            for l in (1, L):
                self._init_norm(f"norm.cat{l}", d * (l + 1))
        dec_in = d * (L + 1) if m == "concat" else d
        self._linear(rng, "dec", dec_in, self.num_classes)

    def _init_vanilla(self, rng):
        cfg = self.config
        widths = [self.num_features] + [cfg.hidden] * (cfg.layers - 1) + [self.num_classes]
        for l in range(1, cfg.layers + 1):
            self._init_kernel(rng, f"gc{l}", widths[l - 1], widths[l])

    # ---- helpers

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self, prefix: str | None = None) -> int:
        return sum(t.data.size for n, t in self.params.items()
                   if prefix is None or n == prefix or n.startswith(prefix + "."))

    def mixer_parameter_count(self) -> int:
        return sum(t.data.size for n, t in self.params.items() if n.startswith("mix"))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state):
        for n, arr in state.items():
            if n not in self.params or self.params[n].shape != np.shape(arr):
                raise ValueError(f"parameter {n!r} does not match this model")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def _norm(self, x, site):
        kind = self.config.norm
        if kind == "l2":
            return ad.l2_normalize_rows(x)
        if kind == "layernorm":
            y = ad.layer_norm_rows(x)
            return ad.add(ad.hadamard(y, self.params[f"{site}.gamma"]), self.params[f"{site}.beta"])
        return x

    def _linear_apply(self, prefix, x):
        out = ad.matmul(x, self.params[f"{prefix}.W"])
        b = self.params.get(f"{prefix}.b")
        return ad.add(out, b) if b is not None else out

    def _conv(self, op, prefix, H, activation):
        k = self.config.kernel
        p = self.params
        if k == "gcn":
            return gcn_layer(op, H, p[f"{prefix}.W"], activation)
        if k == "gat":
            return gat_layer(op, H, p[f"{prefix}.W"], p[f"{prefix}.a_src"], p[f"{prefix}.a_dst"], activation)
        if k == "gin":
            mlp = (p[f"{prefix}.mlp1.W"], p[f"{prefix}.mlp1.b"], p[f"{prefix}.mlp2.W"], p[f"{prefix}.mlp2.b"])
            return gin_layer(op, H, mlp, p[f"{prefix}.eps"], activation)
        out = self._linear_apply(prefix, H)
        return ad.relu(out) if activation else out

    def _gate_logit(self, l, cat):
        m = self.config.mixer
        if m == "linear":
            return self._linear_apply("mix", cat)
        if m == "unshared":
            return self._linear_apply(f"mix{l}", cat)
        depth = 2 if m == "mlp2" else 3
        x = cat
        for i in range(1, depth + 1):
            x = self._linear_apply(f"mix.l{i}", x)
            if i < depth:
                x = ad.relu(x)
        return x

    # ---- forward

    def forward(self, op, X, training: bool = False, force_alpha: float | None = None) -> ForwardTrace:
        """Run the model; ``op`` comes from :func:`build_propagation`.

        ``force_alpha`` pins every gate to a constant (debug hook for the
        degenerate cases).
        """
        X = ad.as_tensor(X)
        if X.shape[1] != self.num_features:
            raise ad.ShapeError(f"model expects {self.num_features} features, got {X.shape[1]}")
        if self.config.mode == "vanilla":
            return self._forward_vanilla(op, X, training)
        return self._forward_cagnn(op, X, training, force_alpha)

    __call__ = forward

    def _forward_vanilla(self, op, X, training):
        cfg = self.config
        h = ad.dropout(X, cfg.dropout, training, self._dropout_rng)
        hs = []
        for l in range(1, cfg.layers + 1):
            last = l == cfg.layers
            h = self._conv(op, f"gc{l}", h, activation=cfg.activation and not last)
            if not last:
                h = ad.dropout(h, cfg.dropout, training, self._dropout_rng)
            hs.append(h)
        return ForwardTrace([], ad.log_softmax_rows(h), h, [], hs)

    def _forward_cagnn(self, op, X, training, force_alpha):
        cfg = self.config
        n = X.shape[0]
        x = ad.dropout(X, cfg.dropout, training, self._dropout_rng)
        s = h = self._norm(self._linear_apply("enc", x), "norm.enc")
        s_layers, h_layers, alphas = [s], [h], []
        L = cfg.layers
        for l in range(1, L + 1):
            h = self._norm(self._conv(op, f"gc{l}", h, cfg.activation), f"norm.gc{l}")
            m = cfg.mixer
            if m == "add":
                s = self._norm(ad.add(s, h), f"norm.mix{l}")
            elif m == "concat":
                s = ad.concat_cols(s, h)
                if l in (1, L):
                    s = self._norm(s, f"norm.cat{l}")
            else:
                if force_alpha is not None:
                    alpha = Tensor(np.full((n, 1), float(force_alpha)))
                elif m == "global":
                    alpha = ad.hadamard(Tensor(np.ones((n, 1))), ad.sigmoid(self.params[f"mix{l}.logit"]))
                else:
                    alpha = ad.sigmoid(self._gate_logit(l, ad.concat_cols(s, h)))
                    self._check_alpha(alpha.data)
                alphas.append(alpha.data.copy())
                mixed = ad.add(ad.broadcast_col(ad.sub(1.0, alpha), s), ad.broadcast_col(alpha, h))
                s = self._norm(mixed, f"norm.mix{l}")
            s_layers.append(s)
            h_layers.append(h)
        out = ad.dropout(s, cfg.dropout, training, self._dropout_rng)
        logits = ad.log_softmax_rows(self._linear_apply("dec", out))
        return ForwardTrace(alphas, logits, s, s_layers, h_layers)

    def _check_alpha(self, a):
        if self.config.norm == "none":
            ok = np.all((a >= 0) & (a <= 1))
        else:
            ok = np.all((a > 0) & (a < 1))
        if not ok:
            raise AlphaRangeError("gate value left the open interval (0, 1)")


def cagnn_forward(model: CagnnModel, op, X, training: bool = False, force_alpha=None) -> ForwardTrace:
    return model.forward(op, X, training=training, force_alpha=force_alpha)


def mixer_variant(kind: str, s_prev, h_cur, params: dict, norm=ad.l2_normalize_rows,
                  layer: int = 1, last_layer: int = 1):
    """Apply one mixing step outside a full model.

    ``params`` holds the variant's tensors: ``W``/``b`` for linear and
    unshared, ``logit`` for global, ``W1``.. ``b3`` for the MLP gates.
    Returns ``(s_next, alpha)`` with ``alpha`` None for add/concat.
    """
    if kind == "add":
        return norm(ad.add(s_prev, h_cur)), None
    if kind == "concat":
        s = ad.concat_cols(s_prev, h_cur)
        return (norm(s) if layer in (1, last_layer) else s), None
    n = s_prev.shape[0]
    if kind == "global":
        alpha = ad.hadamard(Tensor(np.ones((n, 1))), ad.sigmoid(params["logit"]))
    elif kind in ("linear", "unshared"):
        cat = ad.concat_cols(s_prev, h_cur)
        alpha = ad.sigmoid(ad.add(ad.matmul(cat, params["W"]), params["b"]))
    elif kind in ("mlp2", "mlp3"):
        x = ad.concat_cols(s_prev, h_cur)
        depth = 2 if kind == "mlp2" else 3
        for i in range(1, depth + 1):
            x = ad.add(ad.matmul(x, params[f"W{i}"]), params[f"b{i}"])
            if i < depth:
                x = ad.relu(x)
        alpha = ad.sigmoid(x)
    else:
        raise ValueError(f"unknown mixer {kind!r}; expected one of {MIXERS}")
    mixed = ad.add(ad.broadcast_col(ad.sub(1.0, alpha), s_prev), ad.broadcast_col(alpha, h_cur))
    return norm(mixed), alpha


# ----------------------------------------------------------- spectral check

def spectral_check(P, X, alphas, gammas) -> float:
    """Compare the linearized mixing recursion with its polynomial closed form.

    ``alphas`` holds K per-layer (N, 1) gates and ``gammas`` K + 1 scalar
    weights.  The recursion runs ``H^l = gamma^l P^l X`` by repeated sparse
    products and ``S^l = (1 - alpha^l) S^{l-1} + alpha^l H^l`` from
    ``S^0 = H^0``.  The closed form sums ``theta^l * P^l X`` with
    ``theta^l = gamma^l alpha^l prod_{k>l} (1 - alpha^k)`` (``alpha^0 = 1``),
    using dense matrix powers.  Returns the max absolute difference.
    """
    K = len(alphas)
    if len(gammas) != K + 1:
        raise ValueError(f"need {K + 1} gammas for {K} layers, got {len(gammas)}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    a = [np.ones((n, 1))] + [np.asarray(al, dtype=np.float64).reshape(n, 1) for al in alphas]
    if any(np.any((al < 0) | (al > 1)) for al in a):
        raise ValueError("gate values must lie in [0, 1]")
    sparse = P if isinstance(P, SparseMatrix) else SparseMatrix.from_dense(P)
    dense = sparse.to_dense()

    prop = X.copy()
    s = gammas[0] * prop
    for l in range(1, K + 1):
        prop = sparse.matvec_dense(prop)
        s = (1.0 - a[l]) * s + a[l] * (gammas[l] * prop)

    closed = np.zeros_like(X)
    for l in range(K + 1):
        theta = gammas[l] * a[l].copy()
        for k in range(l + 1, K + 1):
            theta *= 1.0 - a[k]
        closed += theta * (np.linalg.matrix_power(dense, l) @ X)
    return float(np.max(np.abs(s - closed)))


# ------------------------------------------------------------- checkpoints

def save_checkpoint(model: CagnnModel, path) -> None:
    payload = {
        "config": asdict(model.config),
        "num_features": model.num_features,
        "num_classes": model.num_classes,
        "params": {n: t.data.tolist() for n, t in model.params.items()},
    }
    atomic_write_text(path, json.dumps(payload))


def load_checkpoint(path) -> CagnnModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    model = CagnnModel(ModelConfig(**payload["config"]), payload["num_features"], payload["num_classes"])
    missing = set(model.params) - set(payload["params"])
    if missing:
        raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
    model.load_state_dict({n: np.asarray(v) for n, v in payload["params"].items()})
    return model
