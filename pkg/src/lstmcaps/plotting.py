"""Static figures written next to the delimited reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}  # keep files free of version stamps


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def loss_curves(report, path, title="training"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = np.arange(1, len(report.train_loss_curve) + 1)
    ax.plot(epochs, report.train_loss_curve, label="train")
    ax.plot(epochs, report.val_loss_curve, label="validation")
    if report.best_epoch >= 0:
        ax.axvline(report.best_epoch + 1, color="grey", ls=":", label="best epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def error_histogram(hist, path, name=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    widths = np.diff(hist.edges)
    ax.bar(hist.edges[:-1], hist.counts, width=widths, align="edge", edgecolor="black", lw=0.3)
    ax.axvline(hist.threshold, color="red", label=f"threshold {hist.threshold:.4g}")
    ax.set_xlabel("window MAE")
    ax.set_ylabel("windows")
    ax.set_title(f"calibration errors, {name or f'feature {hist.feature}'}")
    ax.legend()
    return _save(fig, path)


def detection(series, index, flags, truth=None, path=None, feature_names=None):
    """Series with flagged points shaded red and true anomalies shaded green."""
    series = np.asarray(series)
    F = series.shape[1]
    fig, axes = plt.subplots(F, 1, figsize=(8, 1.6 * F + 0.6), sharex=True, squeeze=False)
    for f, ax in enumerate(axes[:, 0]):
        ax.plot(index, series[index, f], lw=0.7, color="black")
        lo, hi = series[index, f].min(), series[index, f].max()
        ax.fill_between(index, lo, hi, where=flags, color="red", alpha=0.25, step="mid",
                        label="flagged")
        if truth is not None:
            ax.fill_between(index, lo, hi, where=truth, color="green", alpha=0.2, step="mid",
                            label="labelled")
        ax.set_ylabel(feature_names[f] if feature_names else f"f{f}")
    axes[0, 0].legend(loc="upper right", fontsize="small")
    axes[-1, 0].set_xlabel("index")
    return _save(fig, path)


def design_curves(comparison, path):
    """Mean validation curve per design (runs truncated to the shortest)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for d, stats in comparison.designs.items():
        n = min(len(v) for _, v in stats.curves)
        mean_val = np.mean([v[:n] for _, v in stats.curves], axis=0)
        mean_train = np.mean([t[:n] for t, _ in stats.curves], axis=0)
        line, = ax.plot(np.arange(1, n + 1), mean_val, label=f"{d} val")
        ax.plot(np.arange(1, n + 1), mean_train, ls="--", color=line.get_color(), alpha=0.6)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (dashed: train)")
    ax.set_yscale("log")
    ax.legend(fontsize="small")
    return _save(fig, path)


def dataset_scores(result, path):
    """Per-subset F1 and NAB(standard)/100 of the first run."""
    run = result.runs[0]
    names = [d.name for d in run.datasets]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 0.35 * len(names) + 2), 3.5))
    ax.bar(x - 0.2, [d.f1 for d in run.datasets], width=0.4, label="F1")
    ax.bar(x + 0.2, [d.nab["standard"] / 100 for d in run.datasets], width=0.4, label="NAB/100")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize="x-small")
    ax.axhline(0, color="black", lw=0.5)
    ax.legend()
    return _save(fig, path)
