"""Timing harness: slope fits, the repeat protocol, and record plumbing.

Slope-fit expectations use closed-form power laws (exact answers known
independently); protocol tests count calls through instrumented callables
rather than trusting wall clocks.
"""

import numpy as np
import pytest

import polymix.bench as B


# ---------------------------------------------------------------------------
# slope fitting
# ---------------------------------------------------------------------------

def test_fit_exact_quadratic():
    ns = [256, 512, 1024, 2048]
    ts = [3e-9 * n ** 2 for n in ns]
    fit = B.fit_loglog(ns, ts)
    assert abs(fit.slope - 2.0) <= 1e-12
    assert abs(fit.r2 - 1.0) <= 1e-12
    assert fit.n_points == 4


def test_fit_exact_linear_with_intercept():
    ns = [100, 200, 400, 800, 1600]
    ts = [5e-6 * n for n in ns]
    fit = B.fit_loglog(ns, ts)
    assert abs(fit.slope - 1.0) <= 1e-12
    # intercept recovers the constant: log(t) = slope*log(n) + log(5e-6)
    assert abs(fit.intercept - np.log(5e-6)) <= 1e-9


def test_fit_requires_four_points():
    with pytest.raises(B.BenchError):
        B.fit_loglog([1, 2, 3], [1.0, 2.0, 3.0])


def test_fit_rejects_nonpositive():
    with pytest.raises(B.BenchError):
        B.fit_loglog([1, 2, 3, 4], [1.0, 0.0, 3.0, 4.0])


def test_fit_rejects_mismatched_shapes():
    with pytest.raises(B.BenchError):
        B.fit_loglog([1, 2, 3, 4], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# timing protocol
# ---------------------------------------------------------------------------

def test_time_callable_counts_warmups_and_repeats():
    calls = []
    mean, std, used = B.time_callable(lambda: calls.append(1), repeats=10,
                                      warmups=3, resolution=1e-12)
    assert used == 10
    assert len(calls) == 13  # 3 warmups + 10 measured
    assert mean > 0.0
    assert std >= 0.0


def test_time_callable_rejects_low_repeats_or_warmups():
    with pytest.raises(B.BenchError):
        B.time_callable(lambda: None, repeats=9)
    with pytest.raises(B.BenchError):
        B.time_callable(lambda: None, repeats=10, warmups=2)


def test_resolution_guard_doubles_repeats():
    # a ~microsecond callable against a pretend 1 ms-tick clock: the 50-tick
    # floor (50 ms) forces repeated doubling of the measured call count
    calls = []
    mean, std, used = B.time_callable(lambda: calls.append(1), repeats=10,
                                      warmups=3, resolution=1e-3)
    assert used > 10
    assert used % 10 == 0  # doubled from 10, samples stay grouped in tens
    assert len(calls) == 3 + _doubling_total(used)
    # the final timing samples each spanned at least the 50-tick floor
    group = used // 10
    assert mean * group >= 0.05 * (1.0 - 1e-9)


def _doubling_total(final_used):
    """Total measured calls across the doubling schedule ending at final."""
    total, used = 0, 10
    while used < final_used:
        total += used
        used *= 2
    return total + final_used


# ---------------------------------------------------------------------------
# records and sweeps
# ---------------------------------------------------------------------------

def test_record_invariants():
    with pytest.raises(B.BenchError):
        B.BenchRecord("pom", "forward", 8, 1, 4, 9, 1.0, 0.0)
    with pytest.raises(B.BenchError):
        B.BenchRecord("pom", "forward", 8, 1, 4, 10, 0.0, 0.0)
    with pytest.raises(B.BenchError):
        B.BenchRecord("pom", "sideways", 8, 1, 4, 10, 1.0, 0.0)
    with pytest.raises(B.BenchError):
        B.BenchRecord("lstm", "forward", 8, 1, 4, 10, 1.0, 0.0)


def test_record_csv_row_shape():
    rec = B.BenchRecord("mha", "forward_backward", 256, 4, 384, 100,
                        0.0123456789, 0.001)
    fields = rec.csv_row().split(",")
    assert len(fields) == len(B.CSV_HEADER.split(","))
    assert fields[0] == "mha"
    assert fields[1] == "forward_backward"
    assert int(fields[2]) == 256
    assert abs(float(fields[6]) - 0.0123456789) < 1e-9


def test_validate_seq_lens():
    assert B.validate_seq_lens([4, 6, 8, 10]) == [4, 6, 8, 10]
    with pytest.raises(B.BenchError):
        B.validate_seq_lens([4, 6, 8])  # too few
    with pytest.raises(B.BenchError):
        B.validate_seq_lens([4, 8, 6, 10])  # not ascending
    with pytest.raises(B.BenchError):
        B.validate_seq_lens([4, 6, 6, 10])  # not strictly ascending
    with pytest.raises(B.BenchError):
        B.validate_seq_lens([0, 6, 8, 10])


def test_bench_point_runs_both_mechanisms():
    for mech in ("pom", "mha"):
        rec = B.bench_point(mech, "forward", 8, 1, 4, 10, k=1, expand=1,
                            heads=2, seed=0)
        assert rec.mechanism == mech
        assert rec.mean_seconds > 0.0
        assert rec.repeats >= 10


def test_bench_point_rejects_unknown_mechanism():
    with pytest.raises(B.BenchError):
        B.bench_point("gru", "forward", 8, 1, 4, 10)


def test_run_bench_tiny_sweep(tmp_path):
    recs = B.run_bench([4, 6, 8, 10], batch=1, d=4, repeats=10,
                       passes=("forward",), k=1, expand=1, heads=2, seed=0)
    assert len(recs) == 8  # 2 mechanisms x 1 pass x 4 lengths
    seen = {(r.mechanism, r.seq_len) for r in recs}
    assert len(seen) == 8

    path = tmp_path / "bench.csv"
    B.write_bench_csv(path, recs)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == B.CSV_HEADER
    assert len(lines) == 9


def _fake(mech, pass_, n, mean):
    return B.BenchRecord(mech, pass_, n, 4, 384, 10, mean, 0.0)


def test_crossover_point_synthetic():
    fb = "forward_backward"
    recs = []
    for n in (256, 512, 1024, 2048):
        recs.append(_fake("pom", fb, n, 1e-6 * n))
        recs.append(_fake("mha", fb, n, 1e-9 * n ** 2))
    # pom: 256e-6 vs mha 65e-6 at n=256 -> mha wins until 1e-6 n = 1e-9 n^2,
    # i.e. n = 1000; first measured length beyond that is 1024
    assert B.crossover_point(recs) == 1024

    slow_pom = [_fake("pom", fb, n, 1.0) for n in (256, 512, 1024, 2048)]
    fast_mha = [_fake("mha", fb, n, 1e-9 * n ** 2) for n in (256, 512, 1024, 2048)]
    assert B.crossover_point(slow_pom + fast_mha) is None


def test_slope_problems_synthetic():
    fb = "forward_backward"
    good = []
    for n in (256, 512, 1024, 2048):
        good.append(_fake("pom", fb, n, 1e-6 * n))
        good.append(_fake("mha", fb, n, 1e-9 * n ** 2))
    assert B.slope_problems(good) == []

    quadratic_pom = []
    for n in (256, 512, 1024, 2048):
        quadratic_pom.append(_fake("pom", fb, n, 1e-9 * n ** 2))
        quadratic_pom.append(_fake("mha", fb, n, 1e-9 * n ** 2))
    problems = B.slope_problems(quadratic_pom)
    assert len(problems) == 1
    assert "pom" in problems[0]

    linear_mha = []
    for n in (256, 512, 1024, 2048):
        linear_mha.append(_fake("pom", fb, n, 1e-6 * n))
        linear_mha.append(_fake("mha", fb, n, 1e-6 * n))
    problems = B.slope_problems(linear_mha)
    assert len(problems) == 1
    assert "mha" in problems[0]

    assert B.slope_problems([]) == [f"no records measured for pass {fb}"]


def test_slope_for_missing_records():
    with pytest.raises(B.BenchError):
        B.slope_for([], "pom", "forward")


def test_token_count_for_resolution():
    # 256x256 image, patch 2 -> 128x128 = 16384 tokens; 32x32 -> 256
    assert B.token_count_for_resolution(256, 2) == 16384
    assert B.token_count_for_resolution(32, 2) == 256
    assert B.token_count_for_resolution(64, 4) == 256
    with pytest.raises(B.BenchError):
        B.token_count_for_resolution(33, 2)
