"""Figure rendering for training curves, run summaries, and benchmark
reports. Every report path writes PNG figures next to its CSV/JSON output."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curve(path, history, title="loss", log_scale=True) -> None:
    """history: list of floats or list of per-iteration dicts with 'total'
    (and optionally per-term) entries."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if history and isinstance(history[0], dict):
        keys = [k for k in ("total", "input", "occluded", "visible",
                            "density_reg") if k in history[0]]
        for k in keys:
            ys = [rec[k] for rec in history if k in rec]
            ax.plot(ys, label=k, lw=1)
        ax.legend(fontsize=8)
    else:
        ax.plot(list(history), lw=1)
    if log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_bars(path, report, metrics=None) -> None:
    """Per-scene bar chart for each metric in a MetricReport."""
    metrics = metrics or sorted(report.aggregate)
    n = len(metrics)
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.2 * n), squeeze=False)
    for ax, key in zip(axes[:, 0], metrics):
        ids = report.scene_ids
        vals = [report.per_scene[s].get(key, np.nan) for s in ids]
        ax.bar(range(len(ids)), vals, color="#4878b0")
        ax.axhline(report.aggregate[key], color="k", ls="--", lw=1,
                   label=f"mean {report.aggregate[key]:.3g}")
        ax.set_ylabel(key)
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=60, fontsize=6)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_paired_deltas(path, per_scene, metric="novel_psnr",
                       a_key=None, b_key=None, title=None) -> None:
    """Paired pipeline-vs-baseline deltas, one bar per scene.

    per_scene: list of dicts containing '<metric>_pipeline' and
    '<metric>_baseline' (or explicit a_key/b_key)."""
    a_key = a_key or f"{metric}_pipeline"
    b_key = b_key or f"{metric}_baseline"
    deltas = [r[a_key] - r[b_key] for r in per_scene]
    ids = [r.get("scene_id", str(i)) for i, r in enumerate(per_scene)]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    colors = ["#3a923a" if d >= 0 else "#c03d3e" for d in deltas]
    ax.bar(range(len(deltas)), deltas, color=colors)
    ax.axhline(float(np.mean(deltas)), color="k", ls="--", lw=1,
               label=f"mean {np.mean(deltas):+.2f}")
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=60, fontsize=6)
    ax.set_ylabel(f"delta {metric}")
    ax.set_title(title or f"{metric}: pipeline minus baseline")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_tradeoff_curve(path, iterations, input_psnr, novel_psnr,
                        title="input vs novel view PSNR over iterations") -> None:
    """The overfitting trade-off: input-view PSNR keeps rising while
    novel-view PSNR peaks and decays."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iterations, input_psnr, label="input view", color="#4878b0")
    ax.plot(iterations, novel_psnr, label="novel views", color="#c03d3e")
    k = int(np.argmax(novel_psnr))
    ax.axvline(iterations[k], color="gray", ls=":", lw=1,
               label=f"novel peak @ {iterations[k]}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_image_grid(path, images, labels=None, ncol=4) -> None:
    n = len(images)
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    fig, axes = plt.subplots(nrow, ncol, figsize=(2.2 * ncol, 2.4 * nrow),
                             squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i], 0, 1))
            if labels:
                ax.set_title(labels[i], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_benchmark_figures(out_dir, bench) -> list[Path]:
    """Standard figure set for a BenchmarkResult; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in ("novel_psnr", "input_psnr", "consistency"):
        if f"{metric}_pipeline" in bench.per_scene[0]:
            p = out_dir / f"delta_{metric}.png"
            save_paired_deltas(p, bench.per_scene, metric=metric)
            written.append(p)
    return written
