"""Figures written next to the CSV/JSON outputs (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed canvas and no timestamps or random ids, so reruns give identical bytes.
_CANVAS = (8.0, 6.0)
_DPI = 100
_MARKERS = "osD^v<>ph*xP+"


def _save(fig, path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "svg"
    meta = {"Date": None} if fmt == "svg" else {}
    if fmt == "png":
        meta = {"Software": None}
    with matplotlib.rc_context({"svg.hashsalt": "npseg", "svg.fonttype": "none"}):
        fig.savefig(path, format=fmt, dpi=_DPI, metadata=meta)
    plt.close(fig)
    return path


def plot_grid_scatter(cells, path, selection=None) -> Path:
    """Cost per point against N, one series per C; selected cells ringed."""
    fig, ax = plt.subplots(figsize=_CANVAS)
    cmap = plt.get_cmap("tab10")
    cs = sorted({cell.c for cell in cells})
    for i, c in enumerate(cs):
        group = [cell for cell in cells if cell.c == c]
        ax.plot(
            [cell.n for cell in group],
            [cell.cost_per_point for cell in group],
            linestyle="-",
            linewidth=0.8,
            marker=_MARKERS[i % len(_MARKERS)],
            color=cmap(i % 10),
            label=f"C={c}",
        )
    if selection is not None:
        sel = selection.selected
        ax.scatter([s.n for s in sel], [s.cost_per_point for s in sel], s=160,
                   facecolors="none", edgecolors="red", linewidths=1.2, label="selected")
        mc = selection.most_common
        ax.scatter([mc.n], [mc.cost_per_point], s=260, marker="*", color="gold",
                   edgecolors="black", zorder=5, label=f"most common (C={mc.c}, N={mc.n})")
    ax.set_xlabel("N (transitions)")
    ax.set_ylabel("cost per point")
    ax.grid(True, linewidth=0.3)
    ax.legend(fontsize=8, loc="best")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curve(curve, path) -> Path:
    """Per-epoch NLL (and KL) from a training run."""
    epochs = [row["epoch"] for row in curve]
    fig, ax = plt.subplots(figsize=_CANVAS)
    ax.plot(epochs, [row["nll"] for row in curve], marker="o", label="NLL")
    ax.plot(epochs, [row["kl"] for row in curve], marker=".", linestyle="--", label="KL")
    ax.set_xlabel("epoch")
    ax.set_ylabel("per-target value")
    ax.grid(True, linewidth=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_label_strips(depth, strips, path) -> Path:
    """Side-by-side colour strips of label sequences against depth.

    ``strips`` maps a column title to a label array.
    """
    depth = np.asarray(depth, dtype=float)
    names = list(strips)
    fig, axes = plt.subplots(1, len(names), figsize=(1.6 * len(names) + 1.0, 6.0), sharey=True, squeeze=False)
    for ax, name in zip(axes[0], names):
        labels = np.asarray(strips[name])
        ax.imshow(labels[:, None], aspect="auto", cmap="tab20", interpolation="nearest",
                  extent=(0, 1, depth[-1], depth[0]), vmin=0, vmax=19)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
    axes[0][0].set_ylabel("depth")
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(conf, path, title="") -> Path:
    counts = conf.counts
    fig, ax = plt.subplots(figsize=_CANVAS)
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(conf.pred_labels)), [str(v) for v in conf.pred_labels])
    ax.set_yticks(range(len(conf.truth_labels)), [str(v) for v in conf.truth_labels])
    ax.set_xlabel("predicted label")
    ax.set_ylabel("true label")
    top = counts.max() if counts.size else 0
    for (r, c), v in np.ndenumerate(counts):
        if v:
            ax.text(c, r, str(int(v)), ha="center", va="center", fontsize=7,
                    color="white" if v > top / 2 else "black")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
