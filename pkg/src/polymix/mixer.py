"""Polynomial sequence mixing: expansion, masked mixing, selection, streaming.

The mixing layer replaces pairwise attention with a fixed-size summary.
Context tokens are lifted into polynomial features of increasing degree and
averaged into a state; each query token then reweights that state through a
sigmoid gate and projects back to model width:

    out = W_out [ sigmoid(W_sel x) * mean_over_context(features) ]

with features built degree by degree as cumulative Hadamard products of
activated linear projections.  Because the state is an average, cost is
linear in sequence length and the state doubles as an O(1)-update recurrent
summary (see :class:`PoMState`).

Masked variants replace the plain mean by a per-query masked mean with
denominator ``1e-7 + count``; an all-zero mask row yields a zero state and
bumps :data:`kernel_warnings` instead of producing NaN.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from polymix import tensor as T
from polymix.tensor import ShapeError, Tensor, as_tensor

MIX_EPS = 1e-7

# activation name -> (tape op, raw forward, raw derivative)
ACTIVATIONS = {
    "gelu": (T.gelu, T.gelu_array, T.gelu_grad_array),
    "silu": (T.silu, T.silu_array, T.silu_grad_array),
    "sigmoid": (T.sigmoid, T.sigmoid_array, T.sigmoid_grad_array),
    "identity": (T.identity, lambda x: x.copy(), np.ones_like),
}


class KernelWarnings:
    """Counts soft error conditions that are handled, not raised."""

    def __init__(self):
        self.zero_mask_rows = 0

    def reset(self):
        self.zero_mask_rows = 0


kernel_warnings = KernelWarnings()


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PoMParams:
    """Weights of one mixing layer.

    ``w_poly`` stacks the k degree projections side by side (d -> k*D with
    D = expand*d), ``w_sel`` is the selection projection of the same output
    width, ``w_out`` maps the gated state back to d.  Weights are stored in
    (in, out) layout so application is ``x @ w + b``.
    """

    d: int
    k: int
    expand: int
    w_poly: Tensor
    w_sel: Tensor
    w_out: Tensor
    b_poly: Tensor | None = None
    b_sel: Tensor | None = None
    b_out: Tensor | None = None
    activation: str = "gelu"

    @property
    def feature_dim(self) -> int:
        return self.k * self.expand * self.d

    def validate(self) -> None:
        kd = self.feature_dim
        if self.k < 1 or self.expand < 1:
            raise ShapeError(f"degree {self.k} and expansion {self.expand} must be >= 1")
        if self.w_poly.shape != (self.d, kd):
            raise ShapeError(f"w_poly must be {(self.d, kd)}, got {self.w_poly.shape}")
        if self.w_sel.shape != (self.d, kd):
            raise ShapeError(f"w_sel must be {(self.d, kd)}, got {self.w_sel.shape}")
        if self.w_out.shape != (kd, self.d):
            raise ShapeError(f"w_out must be {(kd, self.d)}, got {self.w_out.shape}")
        for t, want in ((self.b_poly, kd), (self.b_sel, kd), (self.b_out, self.d)):
            if t is not None and t.shape != (want,):
                raise ShapeError(f"bias {t.name} must be ({want},), got {t.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for t in self.tensors().values():
            if not np.isfinite(t.data).all():
                raise ValueError(f"non-finite values in {t.name}")

    def tensors(self) -> dict[str, Tensor]:
        out = {"w_poly": self.w_poly, "w_sel": self.w_sel, "w_out": self.w_out}
        for name in ("b_poly", "b_sel", "b_out"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out


def init_pom_params(d: int, k: int, expand: int = 1, rng: np.random.Generator | None = None,
                    dtype=np.float64, bias: bool = True, std: float | None = None,
                    activation: str = "gelu", prefix: str = "pom") -> PoMParams:
    """Gaussian init; ``std=None`` scales each projection by 1/sqrt(fan_in)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kd = k * expand * d

    def w(shape, name, fan_in):
        s = std if std is not None else fan_in ** -0.5
        return Tensor((rng.standard_normal(shape) * s).astype(dtype),
                      requires_grad=True, name=f"{prefix}.{name}")

    def zeros(n, name):
        if not bias:
            return None
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True, name=f"{prefix}.{name}")

    p = PoMParams(d=d, k=k, expand=expand,
                  w_poly=w((d, kd), "w_poly", d),
                  w_sel=w((d, kd), "w_sel", d),
                  w_out=w((kd, d), "w_out", kd),
                  b_poly=zeros(kd, "b_poly"),
                  b_sel=zeros(kd, "b_sel"),
                  b_out=zeros(d, "b_out"),
                  activation=activation)
    p.validate()
    return p


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

class MaskSpec:
    """Base for context-visibility patterns; see the concrete variants."""


@dataclasses.dataclass(frozen=True)
class NoneMask(MaskSpec):
    """Every query sees the whole context; the state collapses to one row."""

    def dense(self, b: int, n: int) -> np.ndarray:
        return np.ones((b, 1, n))


@dataclasses.dataclass(frozen=True)
class Causal(MaskSpec):
    """Query i sees context positions 1..i (inclusive, 1-indexed)."""

    def dense(self, b: int, n: int) -> np.ndarray:
        return np.broadcast_to(np.tril(np.ones((n, n))), (b, n, n)).copy()


@dataclasses.dataclass(frozen=True)
class BlockCausal(MaskSpec):
    """Query i sees every position j with j <= ceil(i/K)*K (1-indexed).

    Tokens inside one block of size K all see each other; nothing leaks in
    from later blocks.  K=1 is exactly :class:`Causal`.
    """

    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"block size must be >= 1, got {self.K}")

    def dense(self, b: int, n: int) -> np.ndarray:
        m = np.zeros((n, n))
        for i in range(n):
            m[i, : _block_end(i, self.K, n)] = 1.0
        return np.broadcast_to(m, (b, n, n)).copy()


@dataclasses.dataclass(frozen=True)
class Padding(MaskSpec):
    """Per-batch context validity (batch x n of {0,1}); one state row."""

    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.valid)
        if v.ndim != 2:
            raise ShapeError(f"padding mask must be 2-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("padding mask entries must be 0 or 1")
        object.__setattr__(self, "valid", v.astype(np.float64))

    def dense(self, b: int, n: int) -> np.ndarray:
        if self.valid.shape != (b, n):
            raise ShapeError(f"padding mask is {self.valid.shape}, expected {(b, n)}")
        return self.valid[:, None, :].copy()


@dataclasses.dataclass(frozen=True)
class Full(MaskSpec):
    """Arbitrary binary visibility, batch x m x n (query rows, context cols)."""

    m: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.m)
        if arr.ndim != 3:
            raise ShapeError(f"full mask must be 3-D, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("full mask entries must be 0 or 1")
        object.__setattr__(self, "m", arr.astype(np.float64))

    def dense(self, b: int, n: int) -> np.ndarray:
        if self.m.shape[0] != b or self.m.shape[2] != n:
            raise ShapeError(f"full mask is {self.m.shape}, expected batch {b}, context {n}")
        return self.m.copy()


def _block_end(i: int, K: int, n: int) -> int:
    """Number of visible context tokens for 0-indexed query i under block size K."""
    return min((i // K + 1) * K, n)


# ---------------------------------------------------------------------------
# kernel operations
# ---------------------------------------------------------------------------

def _project(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    return T.linear(x, w, b)


def polynomial_expand(xc, params: PoMParams, activation: str | None = None) -> Tensor:
    """Lift context tokens to stacked degree-1..k features (batch x n x k*D).

    Projects to k*D, applies the activation, then turns chunk m into the
    running Hadamard product of chunks 1..m.  Degrees 2..4 take a fused
    code path that matches the chunked reference bitwise in f64.
    """
    xc = as_tensor(xc)
    if xc.shape[-1] != params.d:
        raise ShapeError(f"context width {xc.shape[-1]} != model width {params.d}")
    name = activation if activation is not None else params.activation
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}")
    if params.k in (2, 3, 4):
        return _expand_fused(xc, params, name)
    return polynomial_expand_reference(xc, params, name)


def polynomial_expand_reference(xc, params: PoMParams, activation: str | None = None) -> Tensor:
    """Chunk-by-chunk reference path for any degree (the semantic baseline)."""
    xc = as_tensor(xc)
    name = activation if activation is not None else params.activation
    act_op = ACTIVATIONS[name][0]
    h = act_op(_project(xc, params.w_poly, params.b_poly))
    if params.k == 1:
        return h
    chunks = T.chunk(h, params.k, axis=-1)
    prods = [chunks[0]]
    for m in range(1, params.k):
        prods.append(T.mul(chunks[m], prods[-1]))
    return T.concat(prods, axis=-1)


def _expand_raw(xd: np.ndarray, wd: np.ndarray, bd: np.ndarray | None,
                k: int, act_fn) -> np.ndarray:
    lead = xd.shape[:-1]
    z = xd.reshape(-1, xd.shape[-1]) @ wd
    if bd is not None:
        z = z + bd
    h = act_fn(z)
    D = h.shape[1] // k
    for m in range(1, k):
        h[:, m * D:(m + 1) * D] *= h[:, (m - 1) * D:m * D]
    return h.reshape(lead + (h.shape[1],))


def _expand_fused(xc: Tensor, params: PoMParams, name: str) -> Tensor:
    """Single-node expansion (po2/po3/po4): recomputes in backward, stores no
    intermediate chunks on the tape."""
    _, act_fn, act_grad = ACTIVATIONS[name]
    k = params.k
    w, b = params.w_poly, params.b_poly
    inputs = (xc, w) if b is None else (xc, w, b)
    out = Tensor(_expand_raw(xc.data, w.data, None if b is None else b.data, k, act_fn))

    def fwd(*datas):
        xd, wd = datas[0], datas[1]
        bd = datas[2] if len(datas) > 2 else None
        return _expand_raw(xd, wd, bd, k, act_fn)

    def bwd(g, need):
        xd, wd = xc.data, w.data
        rows = xd.reshape(-1, xd.shape[-1])
        z = rows @ wd
        if b is not None:
            z = z + b.data
        a = act_fn(z)
        p = out.data.reshape(z.shape)
        gm = np.asarray(g).reshape(z.shape)
        D = z.shape[1] // k
        ga = np.empty_like(a)
        gp = gm[:, (k - 1) * D:].copy()
        for m in range(k - 1, 0, -1):
            ga[:, m * D:(m + 1) * D] = gp * p[:, (m - 1) * D:m * D]
            gp = gm[:, (m - 1) * D:m * D] + gp * a[:, m * D:(m + 1) * D]
        ga[:, :D] = gp
        gz = ga * act_grad(z)
        gx = (gz @ wd.T).reshape(xd.shape) if need[0] else None
        gw = rows.T @ gz if need[1] else None
        grads = [gx, gw]
        if b is not None:
            grads.append(gz.sum(axis=0) if need[2] else None)
        return grads

    return T.record(f"po{k}", out, inputs, fwd, bwd)


def mix(features, mask: MaskSpec | None, normalize: bool = True) -> Tensor:
    """Reduce context features to per-query states under a visibility mask.

    Returns batch x m x k*D where m is 1 (NoneMask, Padding) or n (causal
    family, Full).  ``normalize=False`` returns plain masked sums.
    """
    f = as_tensor(features)
    if f.ndim != 3:
        raise ShapeError(f"features must be batch x n x kD, got {f.shape}")
    bsz, n, _ = f.shape
    if mask is None:
        mask = NoneMask()

    if isinstance(mask, NoneMask):
        if normalize:
            return T.reduce_mean(f, axis=1, keepdims=True)
        return T.reduce_sum(f, axis=1, keepdims=True)

    if isinstance(mask, Padding):
        if mask.valid.shape != (bsz, n):
            raise ShapeError(f"padding mask is {mask.valid.shape}, expected {(bsz, n)}")
        counts = mask.valid.sum(axis=1)
        kernel_warnings.zero_mask_rows += int((counts == 0).sum())
        s = T.reduce_sum(T.mul_const(f, mask.valid[:, :, None]), axis=1, keepdims=True)
        if normalize:
            s = T.mul_const(s, (1.0 / (MIX_EPS + counts))[:, None, None])
        return s

    if isinstance(mask, (Causal, BlockCausal)):
        K = mask.K if isinstance(mask, BlockCausal) else 1
        prefix = T.cumsum(f, axis=1)
        idx = np.array([_block_end(i, K, n) - 1 for i in range(n)], dtype=np.intp)
        s = T.take_index(prefix, idx, axis=1)
        if normalize:
            counts = (idx + 1).astype(np.float64)
            s = T.mul_const(s, (1.0 / (MIX_EPS + counts))[None, :, None])
        return s

    if isinstance(mask, Full):
        if mask.m.shape[0] != bsz or mask.m.shape[2] != n:
            raise ShapeError(f"full mask is {mask.m.shape}, expected batch {bsz}, context {n}")
        counts = mask.m.sum(axis=2)
        kernel_warnings.zero_mask_rows += int((counts == 0).sum())
        s = T.matmul(Tensor(mask.m.astype(f.dtype)), f)
        if normalize:
            s = T.mul_const(s, (1.0 / (MIX_EPS + counts))[:, :, None])
        return s

    raise TypeError(f"unsupported mask {type(mask).__name__}")


def select(xq, params: PoMParams, state) -> Tensor:
    """Gate the mixed state per query and project back to model width."""
    xq = as_tensor(xq)
    state = as_tensor(state)
    n = xq.shape[-2]
    gate = T.sigmoid(_project(xq, params.w_sel, params.b_sel))
    if state.shape[-2] == 1:
        state = T.expand(state, axis=-2, size=n)
    elif state.shape[-2] != n:
        raise ShapeError(f"state rows {state.shape[-2]} must be 1 or {n}")
    return _project(T.mul(gate, state), params.w_out, params.b_out)


def pom_forward(xq, params: PoMParams, mask: MaskSpec | None = None, xc=None,
                activation: str | None = None) -> Tensor:
    """Full mixing layer; ``xc=None`` mixes the query sequence with itself."""
    xq = as_tensor(xq)
    context = xq if xc is None else as_tensor(xc)
    features = polynomial_expand(context, params, activation)
    state = mix(features, mask, normalize=True)
    return select(xq, params, state)


# ---------------------------------------------------------------------------
# streaming state
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PoMState:
    """Running context summary: feature sum plus absorbed-token count.

    Carrying the count (rather than a pre-divided mean) keeps updates
    associative and lets queries reuse the masked-mean denominator.
    """

    sum: np.ndarray
    count: int


def state_init(params: PoMParams, dtype=np.float64) -> PoMState:
    return PoMState(sum=np.zeros(params.feature_dim, dtype=dtype), count=0)


def state_update(state: PoMState, token_features: np.ndarray) -> PoMState:
    f = np.asarray(token_features)
    if f.shape != state.sum.shape:
        raise ShapeError(f"token features {f.shape} != state width {state.sum.shape}")
    return PoMState(sum=state.sum + f, count=state.count + 1)


def state_update_block(state: PoMState, block_features: np.ndarray) -> PoMState:
    f = np.asarray(block_features)
    if f.ndim != 2 or f.shape[1] != state.sum.shape[0]:
        raise ShapeError(f"block features must be tokens x {state.sum.shape[0]}, got {f.shape}")
    return PoMState(sum=state.sum + f.sum(axis=0), count=state.count + f.shape[0])


def state_query(xq, params: PoMParams, state: PoMState) -> np.ndarray:
    """Evaluate queries against the streamed state (mean semantics).

    Equals the Causal / BlockCausal parallel forward at the matching
    position.  Querying an empty state returns zeros and bumps the
    zero-row warning counter.
    """
    if state.count == 0:
        kernel_warnings.zero_mask_rows += 1
    value = state.sum / (MIX_EPS + state.count)
    xq = np.asarray(xq)
    single = xq.ndim == 1
    rows = xq[None, None, :] if single else xq[None, :, :]
    out = select(Tensor(rows), params, Tensor(value[None, None, :].astype(rows.dtype)))
    return out.data[0, 0] if single else out.data[0]


# ---------------------------------------------------------------------------
# contextual distinctness
# ---------------------------------------------------------------------------

def contextual_distinctness_check(params: PoMParams, X: np.ndarray, Xp: np.ndarray,
                                  tol: float = 1e-8) -> bool:
    """Do all output columns separate, within and across two inputs?

    ``X`` and ``Xp`` are d x n column-token matrices.  True iff (a) the
    outputs for X are pairwise distinct beyond ``tol`` in max-abs, and (b)
    every output column for X differs from every output column for Xp.
    """
    ya = pom_forward(Tensor(np.asarray(X).T[None]), params, NoneMask()).data[0].T
    yb = pom_forward(Tensor(np.asarray(Xp).T[None]), params, NoneMask()).data[0].T
    n = ya.shape[1]
    for i in range(n):
        for j in range(i + 1, n):
            if np.max(np.abs(ya[:, i] - ya[:, j])) <= tol:
                return False
    for i in range(n):
        for j in range(yb.shape[1]):
            if np.max(np.abs(ya[:, i] - yb[:, j])) <= tol:
                return False
    return True


def distinctness_fraction(trials: int, d: int = 4, n: int = 6, k: int = 3,
                          tol: float = 1e-8, seed: int = 0, expand: int = 1) -> float:
    """Monte-Carlo pass rate of the distinctness check on Gaussian draws."""
    rng = np.random.default_rng(seed)
    passed = 0
    for _ in range(trials):
        params = init_pom_params(d, k, expand=expand, rng=rng)
        X = rng.standard_normal((d, n))
        Xp = rng.standard_normal((d, n))
        if contextual_distinctness_check(params, X, Xp, tol=tol):
            passed += 1
    return passed / trials
