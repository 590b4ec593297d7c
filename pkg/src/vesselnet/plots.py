"""Figures written next to the CSV outputs (Agg backend, PNG files)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 4.0),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def roc_figure(curves, path, title="ROC"):
    """``curves`` maps a label to (points, auc)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, (points, auc) in curves.items():
            if not points:
                continue
            fpr, tpr = np.asarray(points).T
            label = name if auc is None else f"{name} (AUC {auc:.4f})"
            ax.plot(fpr, tpr, lw=1.2, label=label)
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def segmentation_figure(plane, prob, mask, path, label=None):
    panels = [("enhanced", plane), ("vessel probability", prob), ("mask", mask)]
    if label is not None:
        panels.append(("ground truth", label))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.2))
        for ax, (name, img) in zip(np.atleast_1d(axes), panels):
            ax.imshow(img, cmap="gray", interpolation="nearest")
            ax.set_title(name)
            ax.axis("off")
        return _save(fig, path)


def training_figure(history, path):
    """``history`` rows: (epoch, loss, val_accuracy)."""
    h = np.asarray(history, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(h[:, 0], h[:, 1], "o-", ms=3, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(h[:, 0], h[:, 2], "s-", ms=3, color="C1", label="val accuracy")
        ax2.set_ylabel("accuracy")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="center right")
        return _save(fig, path)


def weights_figure(table_rows, path):
    """Original vs simplified weights per parameter layer, log scale."""
    rows = [r for r in table_rows if r[4] != "-"]
    names = [f"{r[0]} {r[1]}" for r in rows]
    orig = [int(r[4]) for r in rows]
    simp = [int(r[4]) if r[5] == "Quantized" else int(r[5]) for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        ax.bar(x - 0.2, orig, 0.4, label="original")
        bars = ax.bar(x + 0.2, simp, 0.4, label="simplified")
        for bar, r in zip(bars, rows):
            if r[5] == "Quantized":
                bar.set_hatch("//")
                ax.annotate("ternary", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                            ha="center", va="bottom", fontsize=7)
        ax.set_yscale("log")
        ax.set_xticks(x, names, rotation=20)
        ax.set_ylabel("weights")
        ax.legend()
        return _save(fig, path)


def sparsity_figure(history, path, start_counts=None):
    """``history`` rows: (round, layer, threshold, active_count, val_accuracy, status).

    ``start_counts`` maps layer number to its active count before round 1.
    Rolled-back rounds are drawn hollow.
    """
    start_counts = start_counts or {}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for layer in sorted({r[1] for r in history}):
            rows = [r for r in history if r[1] == layer]
            kept = [(r[0], r[3]) for r in rows if r[5] == "kept"]
            if layer in start_counts:
                kept.insert(0, (0, start_counts[layer]))
            xs, ys = zip(*kept) if kept else ((), ())
            line, = ax.plot(xs, ys, "o-", ms=4, label=f"layer {layer}")
            back = [(r[0], r[3]) for r in rows if r[5] != "kept"]
            if back:
                ax.plot(*zip(*back), "o", ms=6, mfc="none", color=line.get_color())
        if any(r[5] != "kept" for r in history):
            ax.plot([], [], "o", mfc="none", color="0.4", label="rolled back")
        ax.xaxis.get_major_locator().set_params(integer=True)
        ax.set_xlabel("prune round")
        ax.set_ylabel("active weights")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)
