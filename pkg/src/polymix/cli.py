"""The ``polymix`` command line.

Subcommands::

    check      run the kernel property suites (equivariance, streaming, ...)
    gradcheck  compare tape gradients against central finite differences
    bench      time pom vs mha over a sequence-length sweep, CSV + figure
    train      run the toy trainer from a config file
    sample     draw samples from a trained checkpoint
    ablate     degree sweep at constant k*expand budget

Exit codes: 0 success, 1 property/assertion failure (including training
divergence), 2 usage or config error.  Every command is deterministic under
``--seed``; when the flag is absent the ``POM_SEED`` environment variable is
used, then the config file's ``seed`` (where one applies), then 0.  Commands
that write a delimited report also render a matplotlib figure next to it.

numpy is imported lazily inside the handlers so ``--threads`` can pin BLAS
thread-pool sizes through the environment before the library loads.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_SEQ_LENS = "256,512,1024,2048,4096,8192"

SAMPLES_2D_HEADER = "x0,x1,label"


class UsageError(ValueError):
    """Bad flag combination or malformed value; maps to exit code 2."""


def resolve_seed(flag_value, config_value=None) -> int:
    """--seed flag, then POM_SEED, then the config file, then 0."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get("POM_SEED")
    if env is not None:
        try:
            return int(env, 0)
        except ValueError as exc:
            raise UsageError(f"POM_SEED must be an integer, got {env!r}") from exc
    if config_value is not None:
        return config_value
    return 0


def _pin_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise UsageError(f"--threads must be >= 1, got {threads}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _parse_seq_lens(text: str) -> list[int]:
    try:
        lens = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"--seq-lens must be comma-separated integers: {exc}")
    return lens


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def cmd_check(args) -> int:
    from . import checks

    seed = resolve_seed(args.seed)
    names = args.suite if args.suite else None
    results = checks.run_all(seed=seed, names=names)
    for res in results:
        print(res.summary_line())
    failed = [res for res in results if not res.passed]
    if failed:
        print(f"check failed: {failed[0].name} suite", file=sys.stderr)
        return EXIT_FAILURE
    print(f"all {len(results)} suites passed (seed {seed})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_MODULES = ("pom", "image_block", "video_block")
GRADCHECK_TOL = 1e-4


def _gradcheck_case(module: str, seed: int):
    """Build (loss closure, named parameter list) for one module."""
    import numpy as np

    from . import blocks as blocks_mod
    from . import mixer as mixer_mod
    from . import tensor as T

    r = np.random.default_rng(seed)
    if module == "pom":
        p = mixer_mod.init_pom_params(5, 3, expand=1, rng=r)
        x = T.Tensor(r.uniform(-2, 2, size=(2, 4, 5)), requires_grad=True,
                     name="x")
        params = [x] + list(p.tensors().values())

        def build():
            y = mixer_mod.pom_forward(x, p, mixer_mod.Causal())
            return T.reduce_sum(T.mul(y, y))

        return build, params
    if module == "image_block":
        p = blocks_mod.init_image_block(4, 2, ffw_expand=2, rng=r, std=0.3,
                                        zero_finals=False)
        x = T.Tensor(r.uniform(-2, 2, size=(1, 3, 4)), requires_grad=True,
                     name="x")
        c = T.Tensor(r.uniform(-2, 2, size=(1, 4)), requires_grad=True,
                     name="c")
        params = [x, c] + list(p.tensors().values())

        def build():
            y = blocks_mod.image_dip_block(x, c, p)
            return T.reduce_sum(T.mul(y, y))

        return build, params
    if module == "video_block":
        p = blocks_mod.init_video_block(3, 2, ffw_expand=2, rng=r, std=0.3,
                                        zero_finals=False)
        x = T.Tensor(r.uniform(-2, 2, size=(1, 4, 3)), requires_grad=True,
                     name="x")
        t = T.Tensor(r.uniform(-2, 2, size=(1, 3)), requires_grad=True,
                     name="t")
        c = T.Tensor(r.uniform(-2, 2, size=(1, 2, 3)), requires_grad=True,
                     name="c")
        params = [x, t, c] + list(p.tensors().values())

        def build():
            y = blocks_mod.video_dip_block(
                x, t, c, p, temporal_mask=mixer_mod.BlockCausal(2))
            return T.reduce_sum(T.mul(y, y))

        return build, params
    raise UsageError(f"unknown gradcheck module {module!r}")


def cmd_gradcheck(args) -> int:
    from . import tensor as T

    seed = resolve_seed(args.seed)
    modules = args.module if args.module else list(GRADCHECK_MODULES)
    worst_overall = 0.0
    failures = []
    for module in modules:
        build, params = _gradcheck_case(module, seed)
        err, name = T.check_gradients(build, params)
        status = "PASS" if err <= GRADCHECK_TOL else "FAIL"
        print(f"{status}  {module:<12} max relative error {err:.3e} "
              f"(worst: {name}, {len(params)} tensors, tol {GRADCHECK_TOL:g})")
        worst_overall = max(worst_overall, err)
        if err > GRADCHECK_TOL:
            failures.append((module, name, err))
    if failures:
        module, name, err = failures[0]
        print(f"gradcheck failed: {module} parameter {name} "
              f"error {err:.3e} > {GRADCHECK_TOL:g}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"all gradients within {GRADCHECK_TOL:g} (seed {seed})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    _pin_threads(args.threads)
    from . import bench as bench_mod
    from . import reporting

    seed = resolve_seed(args.seed)
    seq_lens = _parse_seq_lens(args.seq_lens)
    mechanisms = (bench_mod.MECHANISMS if args.mechanism == "both"
                  else (args.mechanism,))
    passes = (bench_mod.PASSES if args.passes == "both" else (args.passes,))
    records = bench_mod.run_bench(
        seq_lens, args.batch, args.d, repeats=args.repeats,
        mechanisms=mechanisms, passes=passes, k=args.k, expand=args.expand,
        heads=args.heads, seed=seed,
        progress=lambda rec: print(rec.csv_row(), flush=True))
    bench_mod.write_bench_csv(args.out, records)
    figure = reporting.render_bench_figure(
        records, reporting.figure_path_for(args.out))
    print(f"wrote {args.out} and {figure}")

    for mechanism in mechanisms:
        for pass_ in passes:
            fit = bench_mod.slope_for(records, mechanism, pass_)
            print(f"{mechanism} {pass_}: slope {fit.slope:.3f} "
                  f"r2 {fit.r2:.4f} over {fit.n_points} points")
    if set(mechanisms) == set(bench_mod.MECHANISMS):
        for pass_ in passes:
            cross = bench_mod.crossover_point(records, pass_)
            where = f"n* = {cross}" if cross is not None else "not reached"
            print(f"crossover ({pass_}): {where}")

    if args.assert_slopes:
        problems = bench_mod.slope_problems(records)
        if problems:
            for problem in problems:
                print(f"slope assertion failed: {problem}", file=sys.stderr)
            return EXIT_FAILURE
        print("slope assertions passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / sample / ablate
# ---------------------------------------------------------------------------

def _load_run_config(path: str, seed_flag):
    import dataclasses

    from . import config as config_mod

    cfg = config_mod.load_config(path)
    seed = resolve_seed(seed_flag, cfg.train.seed)
    if seed != cfg.train.seed:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(
            cfg.train, seed=seed))
    return cfg


def cmd_train(args) -> int:
    from . import diffusion, reporting

    cfg = _load_run_config(args.config, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    checkpoint_path = os.path.join(args.out_dir, "checkpoint.pom")
    model, rows = diffusion.train(cfg.train, metrics_path=metrics_path,
                                  checkpoint_path=checkpoint_path)
    figure = reporting.render_training_figure(
        rows, reporting.figure_path_for(metrics_path))
    last = rows[-1]
    print(f"trained {cfg.train.steps} steps ({cfg.train.loss}, "
          f"{cfg.train.dataset}); final loss {last[1]:.6f}")
    print(f"wrote {metrics_path}, {checkpoint_path}, {figure}")
    return EXIT_OK


def write_samples_csv(path: str, samples, labels) -> None:
    import numpy as np

    samples = np.asarray(samples)
    labels = np.asarray(labels)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SAMPLES_2D_HEADER + "\n")
        for row, lab in zip(samples, labels):
            fh.write(f"{row[0]:.17g},{row[1]:.17g},{int(lab)}\n")


def write_samples_pgm(path: str, samples, columns: int | None = None) -> None:
    """Tile 8x8 samples into one plain-text (P2) PGM grid image.

    Values are clipped to [-1.5, 1.5] and mapped to 0..255; tiles are
    separated by a one-pixel black border.
    """
    import numpy as np

    samples = np.asarray(samples).reshape(len(samples), 8, 8)
    count = len(samples)
    cols = columns if columns is not None else int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    height = rows * 9 + 1
    width = cols * 9 + 1
    canvas = np.zeros((height, width), dtype=np.int64)
    levels = np.clip((samples + 1.5) / 3.0, 0.0, 1.0)
    quantized = np.round(levels * 255.0).astype(np.int64)
    for idx in range(count):
        r, c = divmod(idx, cols)
        canvas[r * 9 + 1:r * 9 + 9, c * 9 + 1:c * 9 + 9] = quantized[idx]
    lines = ["P2", f"{width} {height}", "255"]
    lines += [" ".join(str(v) for v in row) for row in canvas]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_sample(args) -> int:
    import numpy as np

    from . import diffusion, reporting

    cfg = _load_run_config(args.config, args.seed)
    checkpoint = args.checkpoint or os.path.join(args.out_dir,
                                                 "checkpoint.pom")
    if not os.path.exists(checkpoint):
        raise UsageError(f"checkpoint not found: {checkpoint}")
    model = diffusion.load_model(checkpoint)
    rng = np.random.default_rng(cfg.train.seed)
    if cfg.sample_label >= 0:
        labels = np.full(cfg.sample_count, cfg.sample_label, dtype=np.intp)
    else:
        labels = rng.integers(0, cfg.train.n_classes, size=cfg.sample_count)
    samples = diffusion.sample(model, cfg.sample_count, cfg.sample_steps,
                               method=cfg.sample_method,
                               cfg_weight=cfg.cfg_weight, labels=labels,
                               rng=rng)
    os.makedirs(args.out_dir, exist_ok=True)
    if cfg.train.dataset == "mixture2d":
        out_path = os.path.join(args.out_dir, "samples.csv")
        write_samples_csv(out_path, samples, labels)
    else:
        out_path = os.path.join(args.out_dir, "samples.pgm")
        write_samples_pgm(out_path, samples)
    reference, _ = diffusion.make_dataset(
        cfg.train.dataset, cfg.train.n_classes).sample(rng, cfg.sample_count)
    figure = reporting.render_samples_figure(
        samples, cfg.train.dataset, reporting.figure_path_for(out_path),
        reference=reference, labels=labels)
    print(f"sampled {cfg.sample_count} points ({cfg.sample_method}, "
          f"guidance {cfg.cfg_weight:g})")
    print(f"wrote {out_path} and {figure}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import diffusion, reporting

    cfg = _load_run_config(args.config, args.seed)
    degrees = _parse_seq_lens(args.degrees)
    if any(k < 1 for k in degrees):
        raise UsageError("--degrees must be positive integers")
    os.makedirs(args.out_dir, exist_ok=True)
    notices: list[str] = []
    rows = diffusion.degree_ablation(cfg.train, degrees=tuple(degrees),
                                     budget=args.budget,
                                     eval_samples=args.eval_samples,
                                     notices=notices)
    out_path = os.path.join(args.out_dir, "ablation.csv")
    diffusion.write_ablation(out_path, rows)
    figure = reporting.render_ablation_figure(
        rows, reporting.figure_path_for(out_path))
    print(diffusion.ABLATION_HEADER)
    for k, e, kd, n_params, loss, ed in rows:
        print(f"{k},{e},{kd},{n_params},{loss:.6f},{ed:.6f}")
    for notice in notices:
        print(f"note: {notice}")
    print(f"wrote {out_path} and {figure}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polymix",
        description="Polynomial-mixer property checks, benchmarks, and the "
                    "toy diffusion trainer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default: POM_SEED env, then config, "
                            "then 0)")

    p_check = sub.add_parser("check", help="run kernel property suites")
    add_seed(p_check)
    p_check.add_argument("--suite", action="append",
                         choices=("equivariance", "streaming", "mask",
                                  "deletion", "distinctness"),
                         help="run only this suite (repeatable)")
    p_check.set_defaults(func=cmd_check)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference gradient comparison")
    add_seed(p_grad)
    p_grad.add_argument("--module", action="append",
                        choices=GRADCHECK_MODULES,
                        help="check only this module (repeatable)")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_bench = sub.add_parser("bench", help="sequence-length scaling timings")
    add_seed(p_bench)
    p_bench.add_argument("--mechanism", choices=("pom", "mha", "both"),
                         default="both")
    p_bench.add_argument("--seq-lens", default=DEFAULT_SEQ_LENS,
                         help="comma-separated ascending lengths "
                              f"(default {DEFAULT_SEQ_LENS})")
    p_bench.add_argument("--batch", type=int, default=4)
    p_bench.add_argument("--d", type=int, default=384)
    p_bench.add_argument("--repeats", type=int, default=100,
                         help="measured calls per point (min 10)")
    p_bench.add_argument("--passes",
                         choices=("forward", "forward_backward", "both"),
                         default="both")
    p_bench.add_argument("--k", type=int, default=2,
                         help="pom polynomial degree")
    p_bench.add_argument("--expand", type=int, default=2,
                         help="pom per-degree width multiplier")
    p_bench.add_argument("--heads", type=int, default=6,
                         help="mha head count")
    p_bench.add_argument("--threads", type=int, default=None,
                         help="pin BLAS thread pools to this size")
    p_bench.add_argument("--out", default="bench.csv",
                         help="CSV output path (figure lands beside it)")
    p_bench.add_argument("--assert", dest="assert_slopes",
                         action="store_true",
                         help="exit 1 unless pom slope is in [0.8, 1.3] and "
                              "mha slope is >= 1.7 (forward_backward)")
    p_bench.set_defaults(func=cmd_bench)

    def add_run_args(p):
        p.add_argument("config", help="key = value config file")
        add_seed(p)
        p.add_argument("--out-dir", default=".",
                       help="directory for artifacts (default .)")

    p_train = sub.add_parser("train", help="run the toy trainer")
    add_run_args(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="sample from a checkpoint")
    add_run_args(p_sample)
    p_sample.add_argument("--checkpoint", default=None,
                          help="checkpoint path (default "
                               "OUT_DIR/checkpoint.pom)")
    p_sample.set_defaults(func=cmd_sample)

    p_ablate = sub.add_parser("ablate",
                              help="degree sweep at constant k*expand")
    add_run_args(p_ablate)
    p_ablate.add_argument("--degrees", default="1,2,3,4,6",
                          help="comma-separated degrees (default 1,2,3,4,6)")
    p_ablate.add_argument("--budget", type=int, default=12,
                          help="constant k*expand budget (default 12)")
    p_ablate.add_argument("--eval-samples", type=int, default=256,
                          help="samples per row for energy distance")
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # map known failure families to exit codes
        from . import bench as bench_mod
        from . import config as config_mod
        from . import diffusion

        if isinstance(exc, (config_mod.ConfigError, bench_mod.BenchError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(exc, diffusion.TrainingError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        raise


if __name__ == "__main__":
    sys.exit(main())
