"""Network blocks built on the polynomial mixer.

Three block flavors:

* ``polymorpher_block``: the plain residual form
  ``P(x) = x + mix(x) + ff(x + mix(x))``, no norms or conditioning,
* ``image_dip_block``: adaptive-norm diffusion block; one condition vector
  per sample produces two (scale, shift) modulation pairs and two gates,
* ``video_dip_block``: cross-mixing from a text sequence followed by
  temporally-masked self-mixing; eight modulation coefficients and three
  gates, all driven by the time condition.

Modulation is ``x * (1 + scale) + shift`` and residuals are gated as
``x + (1 + gate) * f(x)``; with zero-initialized condition / gate heads and
zero-initialized output projections every block starts as the identity.
Layer norms are affine-free with eps 1e-6.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from polymix import tensor as T
from polymix.mixer import MaskSpec, PoMParams, init_pom_params, pom_forward
from polymix.tensor import ShapeError, Tensor, as_tensor

LN_EPS = 1e-6
INIT_STD = 0.02


def _linear_init(shape, rng, std, dtype, name, zero=False):
    data = np.zeros(shape, dtype=dtype) if zero else \
        (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def _bias_init(n, dtype, name):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True, name=name)


def _rows(t, n: int) -> Tensor:
    """Lift a per-sample (b, d) coefficient to (b, n, d) over the sequence."""
    t = as_tensor(t)
    if t.ndim == 2:
        t = T.reshape(t, (t.shape[0], 1, t.shape[1]))
    if t.ndim != 3:
        raise ShapeError(f"modulation coefficient must be 2-D or 3-D, got {t.shape}")
    if t.shape[1] == 1 and n != 1:
        t = T.expand(t, axis=1, size=n)
    elif t.shape[1] != n:
        raise ShapeError(f"coefficient rows {t.shape[1]} do not match sequence {n}")
    return t


def modulation(x, scale, shift) -> Tensor:
    """x * (1 + scale) + shift, coefficients broadcast over the sequence."""
    x = as_tensor(x)
    n = x.shape[1]
    return T.add(T.mul(x, T.scale_shift(_rows(scale, n), 1.0, 1.0)), _rows(shift, n))


def gated_residual(x, f_out, gate) -> Tensor:
    """x + (1 + gate) * f_out; gate = -1 shuts the branch off entirely."""
    x = as_tensor(x)
    f_out = as_tensor(f_out)
    if x.shape != f_out.shape:
        raise ShapeError(f"residual shapes differ: {x.shape} vs {f_out.shape}")
    return T.add(x, T.mul(f_out, T.scale_shift(_rows(gate, x.shape[1]), 1.0, 1.0)))


# ---------------------------------------------------------------------------
# feed-forward and condition heads
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_feed_forward(d: int, expand: int, rng, std: float = INIT_STD,
                      dtype=np.float64, zero_out: bool = False,
                      prefix: str = "ffw") -> FeedForwardParams:
    return FeedForwardParams(
        w1=_linear_init((d, expand * d), rng, std, dtype, f"{prefix}.w1"),
        b1=_bias_init(expand * d, dtype, f"{prefix}.b1"),
        w2=_linear_init((expand * d, d), rng, std, dtype, f"{prefix}.w2", zero=zero_out),
        b2=_bias_init(d, dtype, f"{prefix}.b2"))


def feed_forward(x, p: FeedForwardParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


@dataclasses.dataclass
class CondHeadParams:
    """SiLU then one linear layer, the condition / gate head of a block."""

    w: Tensor
    b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def init_cond_head(d: int, width: int, rng, std: float = INIT_STD, dtype=np.float64,
                   zero: bool = True, prefix: str = "cond") -> CondHeadParams:
    return CondHeadParams(
        w=_linear_init((d, width * d), rng, std, dtype, f"{prefix}.w", zero=zero),
        b=_bias_init(width * d, dtype, f"{prefix}.b"))


def cond_head(c, p: CondHeadParams) -> Tensor:
    return T.linear(T.silu(c), p.w, p.b)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PolymorpherParams:
    pom: PoMParams
    ffw: FeedForwardParams

    def tensors(self) -> dict[str, Tensor]:
        out = {f"pom.{k}": v for k, v in self.pom.tensors().items()}
        out.update({f"ffw.{k}": v for k, v in self.ffw.tensors().items()})
        return out


def init_polymorpher(d: int, k: int, expand: int = 1, ffw_expand: int = 4,
                     rng=None, std: float = INIT_STD, dtype=np.float64,
                     prefix: str = "poly") -> PolymorpherParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    return PolymorpherParams(
        pom=init_pom_params(d, k, expand=expand, rng=rng, dtype=dtype, std=std,
                            prefix=f"{prefix}.pom"),
        ffw=init_feed_forward(d, ffw_expand, rng, std=std, dtype=dtype,
                              prefix=f"{prefix}.ffw"))


def polymorpher_block(x, params: PolymorpherParams, mask: MaskSpec | None = None) -> Tensor:
    x = as_tensor(x)
    y = T.add(x, pom_forward(x, params.pom, mask))
    return T.add(y, feed_forward(y, params.ffw))


@dataclasses.dataclass
class ImageBlockParams:
    """Adaptive-norm image block: self-mix + feed-forward, condition-driven."""

    pom: PoMParams
    ffw: FeedForwardParams
    cond: CondHeadParams   # d -> 4d: s1, b1, s2, b2
    gate: CondHeadParams   # d -> 2d: g1, g2

    def tensors(self) -> dict[str, Tensor]:
        out = {f"pom.{k}": v for k, v in self.pom.tensors().items()}
        out.update({f"ffw.{k}": v for k, v in self.ffw.tensors().items()})
        out.update({f"cond.{k}": v for k, v in self.cond.tensors().items()})
        out.update({f"gate.{k}": v for k, v in self.gate.tensors().items()})
        return out


def init_image_block(d: int, k: int, expand: int = 1, ffw_expand: int = 4, rng=None,
                     std: float = INIT_STD, dtype=np.float64, zero_finals: bool = True,
                     prefix: str = "img") -> ImageBlockParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    pom = init_pom_params(d, k, expand=expand, rng=rng, dtype=dtype, std=std,
                          prefix=f"{prefix}.pom")
    if zero_finals:
        pom.w_out.data[:] = 0.0
    return ImageBlockParams(
        pom=pom,
        ffw=init_feed_forward(d, ffw_expand, rng, std=std, dtype=dtype,
                              zero_out=zero_finals, prefix=f"{prefix}.ffw"),
        cond=init_cond_head(d, 4, rng, std=std, dtype=dtype, zero=zero_finals,
                            prefix=f"{prefix}.cond"),
        gate=init_cond_head(d, 2, rng, std=std, dtype=dtype, zero=zero_finals,
                            prefix=f"{prefix}.gate"))


def image_dip_block(x, c, params: ImageBlockParams, mask: MaskSpec | None = None) -> Tensor:
    """One conditioned block: modulated self-mix, then modulated feed-forward."""
    x = as_tensor(x)
    s1, b1, s2, b2 = T.chunk(cond_head(c, params.cond), 4, axis=-1)
    g1, g2 = T.chunk(cond_head(c, params.gate), 2, axis=-1)

    x_ln = modulation(T.layer_norm(x, LN_EPS), s1, b1)
    x = gated_residual(x, pom_forward(x_ln, params.pom, mask), g1)

    x_ln = modulation(T.layer_norm(x, LN_EPS), s2, b2)
    return gated_residual(x, feed_forward(x_ln, params.ffw), g2)


@dataclasses.dataclass
class VideoBlockParams:
    """Cross-mix from text, temporally masked self-mix, feed-forward."""

    pom: PoMParams
    c_pom: PoMParams
    ffw: FeedForwardParams
    cond: CondHeadParams   # d -> 8d: sx, bx, sc, bc, s1, b1, s2, b2
    gate: CondHeadParams   # d -> 3d: gc, g1, g2

    def tensors(self) -> dict[str, Tensor]:
        out = {f"pom.{k}": v for k, v in self.pom.tensors().items()}
        out.update({f"c_pom.{k}": v for k, v in self.c_pom.tensors().items()})
        out.update({f"ffw.{k}": v for k, v in self.ffw.tensors().items()})
        out.update({f"cond.{k}": v for k, v in self.cond.tensors().items()})
        out.update({f"gate.{k}": v for k, v in self.gate.tensors().items()})
        return out


def init_video_block(d: int, k: int, expand: int = 1, ffw_expand: int = 4, rng=None,
                     std: float = INIT_STD, dtype=np.float64, zero_finals: bool = True,
                     prefix: str = "vid") -> VideoBlockParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    pom = init_pom_params(d, k, expand=expand, rng=rng, dtype=dtype, std=std,
                          prefix=f"{prefix}.pom")
    c_pom = init_pom_params(d, k, expand=expand, rng=rng, dtype=dtype, std=std,
                            prefix=f"{prefix}.c_pom")
    if zero_finals:
        pom.w_out.data[:] = 0.0
        c_pom.w_out.data[:] = 0.0
    return VideoBlockParams(
        pom=pom, c_pom=c_pom,
        ffw=init_feed_forward(d, ffw_expand, rng, std=std, dtype=dtype,
                              zero_out=zero_finals, prefix=f"{prefix}.ffw"),
        cond=init_cond_head(d, 8, rng, std=std, dtype=dtype, zero=zero_finals,
                            prefix=f"{prefix}.cond"),
        gate=init_cond_head(d, 3, rng, std=std, dtype=dtype, zero=zero_finals,
                            prefix=f"{prefix}.gate"))


def video_dip_block(x, t, c, params: VideoBlockParams,
                    text_mask: MaskSpec | None = None,
                    temporal_mask: MaskSpec | None = None) -> Tensor:
    """Cross-mix text into frames, self-mix frames, feed-forward; all gated.

    ``t`` is one condition vector per sample; ``c`` is the text sequence.
    ``temporal_mask`` restricts the self-mix (e.g. block-causal per frame).
    """
    x = as_tensor(x)
    coeffs = T.chunk(cond_head(t, params.cond), 8, axis=-1)
    sx, bx, sc, bc, s1, b1, s2, b2 = coeffs
    gc, g1, g2 = T.chunk(cond_head(t, params.gate), 3, axis=-1)

    x_ln = modulation(T.layer_norm(x, LN_EPS), sx, bx)
    c_ln = modulation(T.layer_norm(as_tensor(c), LN_EPS), sc, bc)
    x = gated_residual(x, pom_forward(x_ln, params.c_pom, text_mask, xc=c_ln), gc)

    x_ln = modulation(T.layer_norm(x, LN_EPS), s1, b1)
    x = gated_residual(x, pom_forward(x_ln, params.pom, temporal_mask), g1)

    x_ln = modulation(T.layer_norm(x, LN_EPS), s2, b2)
    return gated_residual(x, feed_forward(x_ln, params.ffw), g2)


# ---------------------------------------------------------------------------
# positional encodings and patch plumbing
# ---------------------------------------------------------------------------

def sinusoidal_pe(positions, d: int, axes: int = 1) -> np.ndarray:
    """Banded sin/cos encoding, one band block per coordinate axis.

    ``positions`` is (n,) for one axis or (n, axes) otherwise; the result is
    (n, d) with the per-axis blocks concatenated, each block half sines and
    half cosines over a geometric frequency ladder.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 1:
        pos = pos[:, None]
    if pos.ndim != 2 or pos.shape[1] != axes:
        raise ShapeError(f"positions must be (n, {axes}), got {pos.shape}")
    if d % (2 * axes) != 0:
        raise ShapeError(f"width {d} not divisible by 2*axes = {2 * axes}")
    per = d // axes
    half = per // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    parts = []
    for a in range(axes):
        ang = pos[:, a:a + 1] * freqs[None, :]
        parts.append(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))
    return np.concatenate(parts, axis=1)


def patch_positions(h: int, w: int, p: int) -> np.ndarray:
    """Row-major (i, j) grid coordinates of each p x p patch."""
    gi, gj = np.meshgrid(np.arange(h // p), np.arange(w // p), indexing="ij")
    return np.stack([gi.reshape(-1), gj.reshape(-1)], axis=1)


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(b, h, w, c) -> (b, patches, p*p*c), stride = kernel = p, row-major."""
    b, h, w, c = images.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible into {p}x{p} patches")
    x = images.reshape(b, h // p, p, w // p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, h: int, w: int, c: int, p: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    b = patches.shape[0]
    x = patches.reshape(b, h // p, w // p, p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


# ---------------------------------------------------------------------------
# condition embedding (image path)
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ConditionEmbedding:
    """Class table plus a deterministic time-frequency MLP, summed to one
    d-vector per sample.  The last table row is the learned null class used
    when conditioning is dropped."""

    table: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def null_index(self) -> int:
        return self.table.shape[0] - 1

    def tensors(self) -> dict[str, Tensor]:
        return {"table": self.table, "w1": self.w1, "b1": self.b1,
                "w2": self.w2, "b2": self.b2}


def init_condition_embedding(n_classes: int, d: int, rng=None, std: float = INIT_STD,
                             dtype=np.float64, prefix: str = "cond_emb") -> ConditionEmbedding:
    rng = rng if rng is not None else np.random.default_rng(0)
    return ConditionEmbedding(
        table=_linear_init((n_classes + 1, d), rng, std, dtype, f"{prefix}.table"),
        w1=_linear_init((d, d), rng, std, dtype, f"{prefix}.w1"),
        b1=_bias_init(d, dtype, f"{prefix}.b1"),
        w2=_linear_init((d, d), rng, std, dtype, f"{prefix}.w2"),
        b2=_bias_init(d, dtype, f"{prefix}.b2"))


def time_features(t, d: int) -> np.ndarray:
    """Sinusoidal features of diffusion time in [0, 1]; deterministic."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return sinusoidal_pe(t * 1000.0, d, axes=1)


def embed_condition(labels, t, ce: ConditionEmbedding) -> Tensor:
    """(class row) + MLP(time features) -> (b, d)."""
    cls = T.take_rows(ce.table, np.asarray(labels, dtype=np.intp))
    tf = Tensor(time_features(t, ce.table.shape[1]).astype(ce.table.dtype))
    th = T.linear(T.silu(T.linear(tf, ce.w1, ce.b1)), ce.w2, ce.b2)
    return T.add(cls, th)
