"""Self-contained property suites behind the ``check`` CLI command.

Each suite stresses one behavioural contract of the mixing kernel on random
f64 inputs and reports the worst deviation it saw.  The equivariance suite
doubles as a correctness oracle: besides permutation equivariance it
re-derives every output with a straight-line dense-mask numpy reference, so
a structural mutation anywhere in the production forward path (expansion,
mixing, gating, projection) shows up here even though both routes share the
same parameters.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import mixer as mixer_mod
from . import tensor as T
from .mixer import (MIX_EPS, BlockCausal, Causal, Full, NoneMask, Padding,
                    init_pom_params, kernel_warnings, pom_forward, state_init)
from .tensor import Tensor


@dataclasses.dataclass(frozen=True)
class CheckResult:
    """Outcome of one property suite."""

    name: str
    passed: bool
    cases: int
    detail: str

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<13} {self.cases:>4} cases  {self.detail}"


def dense_pom_reference(x: np.ndarray, params, mask=None,
                        xc: np.ndarray | None = None) -> np.ndarray:
    """Straight-line numpy re-derivation of the mixing layer.

    Materialises the dense visibility matrix and averages expanded context
    features row by row; no shared code with the production path beyond the
    parameter arrays and scalar activation functions.
    """
    x = np.asarray(x)
    ctx = x if xc is None else np.asarray(xc)
    b, n, d = ctx.shape
    k, e = params.k, params.expand
    kd = params.feature_dim
    width = e * d

    z = ctx @ params.w_poly.data
    if params.b_poly is not None:
        z = z + params.b_poly.data
    act = mixer_mod.ACTIVATIONS[params.activation][1]
    a = act(z)
    h = a.copy()
    for m in range(1, k):
        lo, hi = m * width, (m + 1) * width
        h[..., lo:hi] = h[..., lo:hi] * h[..., lo - width:lo]

    if mask is None or isinstance(mask, NoneMask):
        # unmasked averaging is an exact mean; the epsilon guard only
        # applies when a mask can empty a row
        mixed = h.mean(axis=1, keepdims=True)
    else:
        dense = mask.dense(b, n)
        num = np.einsum("bqc,bcf->bqf", dense, h)
        cnt = dense.sum(axis=2)
        mixed = num / (MIX_EPS + cnt)[..., None]

    s = x @ params.w_sel.data
    if params.b_sel is not None:
        s = s + params.b_sel.data
    gate = 1.0 / (1.0 + np.exp(-s))
    if mixed.shape[1] == 1:
        mixed = np.broadcast_to(mixed, gate.shape)
    out = (gate * mixed) @ params.w_out.data
    if params.b_out is not None:
        out = out + params.b_out.data
    return out


def check_equivariance(seed: int = 0, trials: int = 40, tol: float = 1e-9):
    """Permutation equivariance plus dense-reference agreement, unmasked."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 33))
        n = int(rng.integers(2, 65))
        k = int(rng.integers(1, 5))
        params = init_pom_params(d, k, rng=rng)
        x = rng.standard_normal((1, n, d))
        perm = rng.permutation(n)
        y = pom_forward(Tensor(x), params, NoneMask()).data
        y_perm = pom_forward(Tensor(x[:, perm]), params, NoneMask()).data
        worst = max(worst, float(np.max(np.abs(y_perm - y[:, perm]))))
        ref = dense_pom_reference(x, params, NoneMask())
        worst = max(worst, float(np.max(np.abs(y - ref))))
    return worst <= tol, trials, f"max deviation {worst:.3e} (tol {tol:g})"


def check_streaming(seed: int = 0, tol: float = 1e-10):
    """Token and block streaming reproduce the parallel masked forward."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for K in (1, 2, 4, 7):
        for n in (8, 13, 21):
            d = int(rng.integers(2, 9))
            params = init_pom_params(d, int(rng.integers(1, 4)), rng=rng)
            x = rng.standard_normal((1, n, d))
            feats = mixer_mod.polynomial_expand(Tensor(x), params).data[0]
            parallel = pom_forward(Tensor(x), params, BlockCausal(K)).data[0]
            state = state_init(params)
            for start in range(0, n, K):
                block = feats[start:start + K]
                if K == 1:
                    state = mixer_mod.state_update(state, block[0])
                else:
                    state = mixer_mod.state_update_block(state, block)
                for i in range(start, min(start + K, n)):
                    out = mixer_mod.state_query(x[0, i], params, state)
                    worst = max(worst, float(np.max(np.abs(out - parallel[i]))))
                    cases += 1
    return worst <= tol, cases, f"max deviation {worst:.3e} (tol {tol:g})"


def check_masks(seed: int = 0, trials: int = 12, tol: float = 1e-6):
    """Mask lowerings agree across representations of the same visibility."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for _ in range(trials):
        d = int(rng.integers(2, 17))
        n = int(rng.integers(3, 25))
        b = int(rng.integers(1, 4))
        params = init_pom_params(d, int(rng.integers(1, 4)), rng=rng)
        x = rng.standard_normal((b, n, d))

        causal = pom_forward(Tensor(x), params, Causal()).data
        block1 = pom_forward(Tensor(x), params, BlockCausal(1)).data
        if not np.array_equal(causal, block1):
            return False, cases, "causal and block-causal(1) paths disagree"
        cases += 1

        full = Full(Causal().dense(b, n))
        lowered = pom_forward(Tensor(x), params, full).data
        worst = max(worst, float(np.max(np.abs(lowered - causal))))
        cases += 1

        n_valid = int(rng.integers(1, n + 1))
        valid = np.zeros((b, n))
        valid[:, :n_valid] = 1.0
        padded = pom_forward(Tensor(x), params, Padding(valid)).data
        truncated = pom_forward(Tensor(x[:, :n_valid]), params, NoneMask(),
                                xc=Tensor(x[:, :n_valid])).data
        worst = max(worst, float(np.max(np.abs(padded[:, :n_valid] - truncated))))
        cases += 1

    kernel_warnings.reset()
    empty_params = init_pom_params(3, 2, rng=rng)
    out = pom_forward(Tensor(rng.standard_normal((1, 4, 3))), empty_params,
                      Padding(np.zeros((1, 4)))).data
    if kernel_warnings.zero_mask_rows == 0:
        return False, cases, "fully-masked rows raised no warning"
    # zero state gated by anything stays zero, leaving only the output bias
    worst = max(worst, float(np.max(np.abs(out - empty_params.b_out.data))))
    cases += 1
    return worst <= tol, cases, f"max deviation {worst:.3e} (tol {tol:g})"


def check_deletion(seed: int = 0, trials: int = 20, tol: float = 1e-9):
    """Masked-out context tokens do not influence any output."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 17))
        n = int(rng.integers(3, 25))
        params = init_pom_params(d, int(rng.integers(1, 4)), rng=rng)
        x = rng.standard_normal((1, n, d))
        keep = rng.integers(0, 2, size=n)
        if keep.sum() == 0:
            keep[rng.integers(0, n)] = 1
        masked = pom_forward(Tensor(x), params,
                             Padding(keep[None].astype(float))).data
        kept = x[:, keep.astype(bool)]
        deleted = pom_forward(Tensor(x), params,
                              Padding(np.ones((1, kept.shape[1]))),
                              xc=Tensor(kept)).data
        worst = max(worst, float(np.max(np.abs(masked - deleted))))
    return worst <= tol, trials, f"max deviation {worst:.3e} (tol {tol:g})"


def check_distinctness(seed: int = 0, trials: int = 200, threshold: float = 0.99):
    """Random contexts almost always produce pairwise-distinct outputs."""
    frac = mixer_mod.distinctness_fraction(trials, d=4, n=6, k=3, seed=seed)
    return frac >= threshold, trials, f"pass rate {frac:.3f} (need >= {threshold})"


SUITES = {
    "equivariance": check_equivariance,
    "streaming": check_streaming,
    "mask": check_masks,
    "deletion": check_deletion,
    "distinctness": check_distinctness,
}


def run_suite(name: str, seed: int = 0) -> CheckResult:
    if name not in SUITES:
        raise KeyError(f"unknown check suite {name!r}")
    passed, cases, detail = SUITES[name](seed=seed)
    return CheckResult(name, bool(passed), cases, detail)


def run_all(seed: int = 0, names=None) -> list[CheckResult]:
    chosen = tuple(SUITES) if names is None else tuple(names)
    return [run_suite(name, seed=seed) for name in chosen]
