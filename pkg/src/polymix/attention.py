"""Multi-head softmax attention, the quadratic-cost reference point.

Call-compatible with :func:`polymix.mixer.pom_forward` (same mask types,
same batch x n x d layout) so the benchmark harness can swap mechanisms
freely.  This is a correctness and scaling baseline: plain scaled
dot-product attention with row-max subtraction and nothing fancier, so
slope comparisons against the mixer stay honest.

The attention core is a single fused tape node: it loops over (batch, head)
slices and recomputes the softmax during the backward pass, which keeps
peak memory at one n x n probability matrix instead of all of them.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from polymix import tensor as T
from polymix.mixer import BlockCausal, Causal, Full, MaskSpec, NoneMask, Padding, _block_end
from polymix.tensor import ShapeError, Tensor, as_tensor


@dataclasses.dataclass
class MHAParams:
    """Projections of one attention layer, (in, out) layout, no biases."""

    d: int
    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def validate(self) -> None:
        if self.d % self.heads != 0:
            raise ShapeError(f"model width {self.d} not divisible by {self.heads} heads")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            t = getattr(self, name)
            if t.shape != (self.d, self.d):
                raise ShapeError(f"{name} must be {(self.d, self.d)}, got {t.shape}")

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def init_mha_params(d: int, heads: int, rng: np.random.Generator | None = None,
                    dtype=np.float64, std: float | None = None,
                    prefix: str = "mha") -> MHAParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    s = std if std is not None else d ** -0.5

    def w(name):
        return Tensor((rng.standard_normal((d, d)) * s).astype(dtype),
                      requires_grad=True, name=f"{prefix}.{name}")

    p = MHAParams(d=d, heads=heads, w_q=w("w_q"), w_k=w("w_k"),
                  w_v=w("w_v"), w_o=w("w_o"))
    p.validate()
    return p


def additive_bias(mask: MaskSpec | None, b: int, nq: int, nc: int,
                  dtype=np.float64) -> np.ndarray | None:
    """Lower a visibility mask to an additive 0 / -inf pattern.

    Returns shape (1, nq, nc) for batch-independent masks, (b, nq, nc)
    otherwise, or None when nothing is masked.
    """
    if mask is None or isinstance(mask, NoneMask):
        return None
    neg = np.asarray(-np.inf, dtype=dtype)
    if isinstance(mask, (Causal, BlockCausal)):
        if nq != nc:
            raise ShapeError(f"causal masks need square attention, got {nq} x {nc}")
        K = mask.K if isinstance(mask, BlockCausal) else 1
        out = np.zeros((1, nq, nc), dtype=dtype)
        for i in range(nq):
            out[0, i, _block_end(i, K, nc):] = neg
        return out
    if isinstance(mask, Padding):
        if mask.valid.shape != (b, nc):
            raise ShapeError(f"padding mask is {mask.valid.shape}, expected {(b, nc)}")
        out = np.where(mask.valid[:, None, :] > 0, 0.0, neg).astype(dtype)
        return np.broadcast_to(out, (b, nq, nc)).copy()
    if isinstance(mask, Full):
        if mask.m.shape != (b, nq, nc):
            raise ShapeError(f"full mask is {mask.m.shape}, expected {(b, nq, nc)}")
        return np.where(mask.m > 0, 0.0, neg).astype(dtype)
    raise TypeError(f"unsupported mask {type(mask).__name__}")


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; fully masked rows become all-zero."""
    rm = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - np.where(np.isfinite(rm), rm, 0.0))
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z == 0.0, 1.0, z)


def _softmax_rows_inplace(scores: np.ndarray) -> np.ndarray:
    """Unguarded in-place row softmax for all-finite score matrices.

    With every entry finite the max-subtracted row always contains exp(0)=1,
    so no zero-sum or -inf guards are needed; matches :func:`_softmax_rows`
    bit for bit on finite input while skipping its temporaries.
    """
    rm = scores.max(axis=-1, keepdims=True)
    np.subtract(scores, rm, out=scores)
    np.exp(scores, out=scores)
    z = scores.sum(axis=-1, keepdims=True)
    scores /= z
    return scores


def _bias_slice(bias: np.ndarray | None, s: int, heads: int):
    if bias is None:
        return None
    return bias[0] if bias.shape[0] == 1 else bias[s // heads]


def _attention_core(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None,
                    heads: int) -> Tensor:
    """softmax(q kᵀ / sqrt(dh) + bias) v over stacked (batch*head) slices."""
    B, nq, dh = q.shape
    scale = q.dtype.type(1.0 / math.sqrt(dh))

    def fwd(qd, kd, vd):
        qs = qd * scale  # fold the 1/sqrt(dh) into q: one n*dh pass, not n*n
        out = np.empty((B, nq, dh), dtype=qd.dtype)
        for s in range(B):
            scores = qs[s] @ kd[s].T
            bs = _bias_slice(bias, s, heads)
            if bs is not None:
                scores += bs
                p = _softmax_rows(scores)
            else:
                p = _softmax_rows_inplace(scores)
            out[s] = p @ vd[s]
        return out

    out = Tensor(fwd(q.data, k.data, v.data))

    def bwd(g, need):
        qd, kd, vd = q.data, k.data, v.data
        qs = qd * scale
        gq = np.zeros_like(qd) if need[0] else None
        gk = np.zeros_like(kd) if need[1] else None
        gv = np.zeros_like(vd) if need[2] else None
        for s in range(B):
            scores = qs[s] @ kd[s].T
            bs = _bias_slice(bias, s, heads)
            if bs is not None:
                scores += bs
                p = _softmax_rows(scores)
            else:
                p = _softmax_rows_inplace(scores)
            go = g[s]
            if need[2]:
                gv[s] = p.T @ go
            gp = go @ vd[s].T
            rowdot = np.einsum("ij,ij->i", gp, p)
            np.subtract(gp, rowdot[:, None], out=gp)
            np.multiply(gp, p, out=gp)  # gp now holds d(loss)/d(scores)
            if need[0]:
                gq[s] = (gp @ kd[s]) * scale
            if need[1]:
                gk[s] = gp.T @ qs[s]
        return gq, gk, gv

    return T.record("attention", out, (q, k, v), fwd, bwd)


def _split_heads(x: Tensor, b: int, n: int, h: int, dh: int) -> Tensor:
    x = T.reshape(x, (b, n, h, dh))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b * h, n, dh))


def mha_forward(xq, params: MHAParams, mask: MaskSpec | None = None, xc=None) -> Tensor:
    """Standard multi-head attention; ``xc=None`` attends over the queries."""
    xq = as_tensor(xq)
    context = xq if xc is None else as_tensor(xc)
    if xq.shape[-1] != params.d:
        raise ShapeError(f"query width {xq.shape[-1]} != model width {params.d}")
    b, nq, d = xq.shape
    nc = context.shape[1]
    h = params.heads
    dh = d // h

    q = _split_heads(T.linear(xq, params.w_q), b, nq, h, dh)
    k = _split_heads(T.linear(context, params.w_k), b, nc, h, dh)
    v = _split_heads(T.linear(context, params.w_v), b, nc, h, dh)
    bias = additive_bias(mask, b, nq, nc, dtype=xq.dtype)

    o = _attention_core(q, k, v, bias, h)
    o = T.reshape(o, (b, h, nq, dh))
    o = T.transpose(o, (0, 2, 1, 3))
    o = T.reshape(o, (b, nq, d))
    return T.linear(o, params.w_o)


def attention_weights(xq, params: MHAParams, mask: MaskSpec | None = None,
                      xc=None) -> np.ndarray:
    """Probability tensor (batch, head, nq, nc) for inspection; no tape."""
    xq = as_tensor(xq)
    context = xq if xc is None else as_tensor(xc)
    b, nq, d = xq.shape
    nc = context.shape[1]
    h = params.heads
    dh = d // h
    q = (xq.data.reshape(-1, d) @ params.w_q.data).reshape(b, nq, h, dh)
    k = (context.data.reshape(-1, d) @ params.w_k.data).reshape(b, nc, h, dh)
    bias = additive_bias(mask, b, nq, nc, dtype=xq.dtype)
    probs = np.empty((b, h, nq, nc), dtype=xq.dtype)
    scale = 1.0 / math.sqrt(dh)
    for bi in range(b):
        for hi in range(h):
            scores = (q[bi, :, hi] @ k[bi, :, hi].T) * scale
            bs = _bias_slice(bias, bi * h + hi, h)
            if bs is not None:
                scores = scores + bs
            probs[bi, hi] = _softmax_rows(scores)
    return probs
