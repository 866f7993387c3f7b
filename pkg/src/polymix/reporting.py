"""Figure rendering for CLI reports.

Every command that writes a delimited report also renders a matplotlib
figure next to it (same stem, ``.png``), so a run leaves both a
machine-readable and an eyeball-readable artifact.  The CSV remains the
tested contract; figures are presentation only.  The Agg backend is forced
so rendering works headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import bench as bench_mod  # noqa: E402


def figure_path_for(csv_path: str) -> str:
    """The figure written alongside a delimited report: same stem, .png."""
    stem, _ = os.path.splitext(csv_path)
    return stem + ".png"


def _finish(fig, out_path: str) -> str:
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


_STYLE = {
    ("pom", "forward"): dict(color="tab:blue", linestyle="--", marker="o"),
    ("pom", "forward_backward"): dict(color="tab:blue", linestyle="-",
                                      marker="o"),
    ("mha", "forward"): dict(color="tab:red", linestyle="--", marker="s"),
    ("mha", "forward_backward"): dict(color="tab:red", linestyle="-",
                                      marker="s"),
}


def render_bench_figure(records, out_path: str) -> str:
    """Log-log scaling curves with fitted slopes and the crossover point."""
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    groups = sorted({(r.mechanism, r.pass_) for r in records})
    for mechanism, pass_ in groups:
        pts = sorted((r.seq_len, r.mean_seconds, r.std_seconds)
                     for r in records
                     if r.mechanism == mechanism and r.pass_ == pass_)
        ns = [p[0] for p in pts]
        means = [p[1] for p in pts]
        stds = [p[2] for p in pts]
        label = f"{mechanism} {pass_.replace('_', '+')}"
        if len(ns) >= 4:
            fit = bench_mod.fit_loglog(ns, means)
            label += f" (slope {fit.slope:.2f})"
        ax.errorbar(ns, means, yerr=stds, capsize=3,
                    label=label, **_STYLE[(mechanism, pass_)])
    cross = bench_mod.crossover_point(records)
    if cross is not None:
        ax.axvline(cross, color="gray", linestyle=":",
                   label=f"crossover n*={cross}")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel("mean seconds per call")
    ax.set_title("Sequence-mixer wall-clock scaling")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    return _finish(fig, out_path)


def render_training_figure(rows, out_path: str) -> str:
    """Loss curve (log y) with the learning-rate schedule on a twin axis."""
    steps = [r[0] for r in rows]
    losses = [r[1] for r in rows]
    lrs = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(steps, losses, color="tab:blue", lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss", color="tab:blue")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:orange", lw=1.0, alpha=0.7)
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax.set_title("Training loss and schedule")
    return _finish(fig, out_path)


def render_ablation_figure(rows, out_path: str) -> str:
    """Final loss and sample quality per polynomial degree, equal budget."""
    degrees = [str(r[0]) for r in rows]
    losses = [r[4] for r in rows]
    eds = [r[5] for r in rows]
    xs = np.arange(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.6))
    ax1.bar(xs, losses, color="tab:blue")
    ax1.set_xticks(xs, degrees)
    ax1.set_xlabel("degree k (expand = budget/k)")
    ax1.set_ylabel("final training loss")
    ax2.bar(xs, eds, color="tab:green")
    ax2.set_xticks(xs, degrees)
    ax2.set_xlabel("degree k (expand = budget/k)")
    ax2.set_ylabel("energy distance to data")
    fig.suptitle("Degree ablation at constant k*expand budget")
    return _finish(fig, out_path)


def render_samples_figure(samples, dataset: str, out_path: str,
                          reference=None, labels=None) -> str:
    """Scatter for 2-D samples; an image grid for 8x8 pattern samples."""
    samples = np.asarray(samples)
    if dataset == "mixture2d":
        fig, ax = plt.subplots(figsize=(5.0, 5.0))
        if reference is not None:
            ref = np.asarray(reference)
            ax.scatter(ref[:, 0], ref[:, 1], s=6, alpha=0.3,
                       color="gray", label="data")
        if labels is not None:
            ax.scatter(samples[:, 0], samples[:, 1], s=6, alpha=0.6,
                       c=np.asarray(labels), cmap="tab10", label="samples")
        else:
            ax.scatter(samples[:, 0], samples[:, 1], s=6, alpha=0.6,
                       color="tab:blue", label="samples")
        ax.set_aspect("equal")
        ax.set_title("Generated samples")
        ax.legend(fontsize=8)
        return _finish(fig, out_path)

    grid = min(64, len(samples))
    side = int(np.ceil(np.sqrt(grid)))
    fig, axes = plt.subplots(side, side, figsize=(side, side))
    for idx, ax in enumerate(np.atleast_1d(axes).ravel()):
        ax.axis("off")
        if idx < grid:
            img = samples[idx].reshape(8, 8)
            ax.imshow(img, cmap="gray", vmin=-1.5, vmax=1.5)
    fig.suptitle("Generated pattern samples")
    return _finish(fig, out_path)
