"""Wall-clock scaling measurements for the two sequence mixers.

Times ``pom_forward`` and ``mha_forward`` (forward only, or forward plus a
full backward sweep) over a sweep of sequence lengths at float32, fits a
log-log line to mean seconds versus sequence length, and reports where the
polynomial mixer overtakes attention.  Inputs are synthesized once per
measurement point and reused across repeats so the numbers isolate kernel
cost from data generation.

The timing protocol: at least 3 warmup calls, then at least 10 measured
calls (default 100).  Each timing sample may span a group of consecutive
calls; if the mean call is shorter than 50 timer ticks the repeat count is
doubled (and samples lengthened) until the clock can resolve it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import attention as attention_mod
from . import mixer as mixer_mod
from . import tensor as T

MECH_POM = "pom"
MECH_MHA = "mha"
MECHANISMS = (MECH_POM, MECH_MHA)

PASS_FORWARD = "forward"
PASS_FORWARD_BACKWARD = "forward_backward"
PASSES = (PASS_FORWARD, PASS_FORWARD_BACKWARD)

CSV_HEADER = "mechanism,pass,seq_len,batch,d,repeats,mean_seconds,std_seconds"

MIN_REPEATS = 10
MIN_WARMUPS = 3
RESOLUTION_TICKS = 50
_MAX_GROUP = 1 << 20


class BenchError(ValueError):
    """Invalid benchmark request or unusable timer."""


@dataclass(frozen=True)
class BenchRecord:
    """One measurement point: a mechanism/pass at one sequence length."""

    mechanism: str
    pass_: str
    seq_len: int
    batch: int
    d: int
    repeats: int
    mean_seconds: float
    std_seconds: float

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise BenchError(f"unknown mechanism {self.mechanism!r}")
        if self.pass_ not in PASSES:
            raise BenchError(f"unknown pass {self.pass_!r}")
        if self.mean_seconds <= 0.0:
            raise BenchError("mean_seconds must be positive")
        if self.repeats < MIN_REPEATS:
            raise BenchError(f"repeats must be >= {MIN_REPEATS}")

    def csv_row(self) -> str:
        return (f"{self.mechanism},{self.pass_},{self.seq_len},{self.batch},"
                f"{self.d},{self.repeats},{self.mean_seconds:.9f},"
                f"{self.std_seconds:.9f}")


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares line through (log seq_len, log mean_seconds)."""

    slope: float
    intercept: float
    r2: float
    n_points: int


def fit_loglog(seq_lens, mean_seconds) -> SlopeFit:
    """Fit log(mean_seconds) = slope * log(seq_len) + intercept."""
    xs = np.asarray(seq_lens, dtype=np.float64)
    ys = np.asarray(mean_seconds, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise BenchError("seq_lens and mean_seconds must be equal-length 1-D")
    if xs.size < 4:
        raise BenchError("slope fit needs at least 4 points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise BenchError("slope fit needs positive lengths and times")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return SlopeFit(float(slope), float(intercept), r2, int(xs.size))


def time_callable(fn, repeats: int = 100, warmups: int = MIN_WARMUPS,
                  resolution: float | None = None):
    """Return (mean_seconds, std_seconds, measured_calls) for ``fn()``.

    Runs ``warmups`` untimed calls, then measures ``repeats`` calls with a
    monotonic clock.  When the mean call duration is below
    ``RESOLUTION_TICKS`` timer ticks, the repeat count doubles and calls are
    grouped into longer timing samples until each sample is resolvable.
    ``resolution`` overrides the reported clock resolution (used in tests).
    """
    if repeats < MIN_REPEATS:
        raise BenchError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    if warmups < MIN_WARMUPS:
        raise BenchError(f"warmups must be >= {MIN_WARMUPS}, got {warmups}")
    if resolution is None:
        resolution = time.get_clock_info("perf_counter").resolution
    floor = RESOLUTION_TICKS * resolution

    for _ in range(warmups):
        fn()

    group = 1
    while True:
        samples = []
        n_samples = math.ceil(repeats / group)
        for _ in range(n_samples):
            t0 = time.perf_counter()
            for _ in range(group):
                fn()
            samples.append((time.perf_counter() - t0) / group)
        mean = float(np.mean(samples))
        if mean * group >= floor:
            break
        if group >= _MAX_GROUP:
            raise BenchError("timer cannot resolve this workload")
        group *= 2
        repeats *= 2
    std = float(np.std(samples))
    return mean, std, n_samples * group


def _pom_runner(seq_len, batch, d, k, expand, pass_, rng):
    x = rng.standard_normal((batch, seq_len, d)).astype(np.float32)
    params = mixer_mod.init_pom_params(d, k=k, expand=expand, rng=rng,
                                       dtype=np.float32)
    if pass_ == PASS_FORWARD:
        def run():
            mixer_mod.pom_forward(T.Tensor(x), params)
    else:
        def run():
            with T.Tape() as tape:
                xt = T.Tensor(x, requires_grad=True)
                out = mixer_mod.pom_forward(xt, params)
                tape.backward(T.reduce_sum(out))
    return run


def _mha_runner(seq_len, batch, d, heads, pass_, rng):
    x = rng.standard_normal((batch, seq_len, d)).astype(np.float32)
    params = attention_mod.init_mha_params(d, heads=heads, rng=rng,
                                           dtype=np.float32)
    if pass_ == PASS_FORWARD:
        def run():
            attention_mod.mha_forward(T.Tensor(x), params)
    else:
        def run():
            with T.Tape() as tape:
                xt = T.Tensor(x, requires_grad=True)
                out = attention_mod.mha_forward(xt, params)
                tape.backward(T.reduce_sum(out))
    return run


def bench_point(mechanism, pass_, seq_len, batch, d, repeats, *,
                k=2, expand=2, heads=6, seed=0, warmups=MIN_WARMUPS,
                resolution=None) -> BenchRecord:
    """Measure one (mechanism, pass, seq_len) cell and return its record."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, seq_len]))
    if mechanism == MECH_POM:
        fn = _pom_runner(seq_len, batch, d, k, expand, pass_, rng)
    elif mechanism == MECH_MHA:
        fn = _mha_runner(seq_len, batch, d, heads, pass_, rng)
    else:
        raise BenchError(f"unknown mechanism {mechanism!r}")
    mean, std, used = time_callable(fn, repeats=repeats, warmups=warmups,
                                    resolution=resolution)
    return BenchRecord(mechanism, pass_, seq_len, batch, d, used, mean, std)


def validate_seq_lens(seq_lens) -> list[int]:
    lens = [int(n) for n in seq_lens]
    if len(lens) < 4:
        raise BenchError("need at least 4 sequence lengths for a slope fit")
    if any(n <= 0 for n in lens):
        raise BenchError("sequence lengths must be positive")
    if any(b <= a for a, b in zip(lens, lens[1:])):
        raise BenchError("sequence lengths must be strictly ascending")
    return lens


def run_bench(seq_lens, batch, d, repeats=100, *, mechanisms=MECHANISMS,
              passes=PASSES, k=2, expand=2, heads=6, seed=0,
              warmups=MIN_WARMUPS, resolution=None,
              progress=None) -> list[BenchRecord]:
    """Measure every (mechanism, pass, seq_len) cell of the sweep."""
    lens = validate_seq_lens(seq_lens)
    for m in mechanisms:
        if m not in MECHANISMS:
            raise BenchError(f"unknown mechanism {m!r}")
    for p in passes:
        if p not in PASSES:
            raise BenchError(f"unknown pass {p!r}")
    records = []
    for mechanism in mechanisms:
        for pass_ in passes:
            for n in lens:
                rec = bench_point(mechanism, pass_, n, batch, d, repeats,
                                  k=k, expand=expand, heads=heads, seed=seed,
                                  warmups=warmups, resolution=resolution)
                records.append(rec)
                if progress is not None:
                    progress(rec)
    return records


def slope_for(records, mechanism, pass_) -> SlopeFit:
    pts = [(r.seq_len, r.mean_seconds) for r in records
           if r.mechanism == mechanism and r.pass_ == pass_]
    if not pts:
        raise BenchError(f"no records for {mechanism}/{pass_}")
    pts.sort()
    return fit_loglog([p[0] for p in pts], [p[1] for p in pts])


def crossover_point(records, pass_=PASS_FORWARD_BACKWARD):
    """Smallest measured seq_len where pom is faster than mha, else None."""
    pom = {r.seq_len: r.mean_seconds for r in records
           if r.mechanism == MECH_POM and r.pass_ == pass_}
    mha = {r.seq_len: r.mean_seconds for r in records
           if r.mechanism == MECH_MHA and r.pass_ == pass_}
    for n in sorted(set(pom) & set(mha)):
        if pom[n] < mha[n]:
            return n
    return None


POM_SLOPE_WINDOW = (0.8, 1.3)
MHA_SLOPE_MIN = 1.7


def slope_problems(records, pass_=PASS_FORWARD_BACKWARD) -> list[str]:
    """Human-readable violations of the expected scaling behaviour.

    The polynomial mixer must time near-linearly (slope within
    ``POM_SLOPE_WINDOW``) and attention must time super-linearly (slope at
    least ``MHA_SLOPE_MIN``) on the given pass.  Empty list means both hold.
    """
    problems = []
    lo, hi = POM_SLOPE_WINDOW
    have_pom = any(r.mechanism == MECH_POM and r.pass_ == pass_
                   for r in records)
    have_mha = any(r.mechanism == MECH_MHA and r.pass_ == pass_
                   for r in records)
    if have_pom:
        s = slope_for(records, MECH_POM, pass_)
        if not lo <= s.slope <= hi:
            problems.append(
                f"pom {pass_} slope {s.slope:.3f} outside [{lo}, {hi}]")
    if have_mha:
        s = slope_for(records, MECH_MHA, pass_)
        if s.slope < MHA_SLOPE_MIN:
            problems.append(
                f"mha {pass_} slope {s.slope:.3f} below {MHA_SLOPE_MIN}")
    if not (have_pom or have_mha):
        problems.append(f"no records measured for pass {pass_}")
    return problems


def write_bench_csv(path, records) -> None:
    lines = [CSV_HEADER] + [r.csv_row() for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def token_count_for_resolution(resolution: int, patch: int = 2) -> int:
    """Square-image token count under p-by-p patching: (resolution/patch)^2.

    Maps image side length to the sequence lengths benchmarked here, for
    comparing against resolution-axis timing plots.
    """
    if resolution % patch != 0:
        raise BenchError("resolution must be a multiple of the patch size")
    side = resolution // patch
    return side * side
