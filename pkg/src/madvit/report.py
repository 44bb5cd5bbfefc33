"""Figure rendering for training runs, sweeps and heatmap montages.

Everything draws through the Agg backend and writes straight to files; no
window system is ever touched.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import UsageError


def training_curves(history, path) -> None:
    """Loss and accuracy per epoch, side by side."""
    epochs = [row.epoch for row in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [row.train_loss for row in history], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.grid(True, alpha=0.3)
    ax_acc.plot(epochs, [row.train_acc for row in history], label="train")
    ax_acc.plot(epochs, [row.test_acc for row in history], label="test")
    ax_acc.plot(epochs, [row.mean_class_acc for row in history],
                label="test mean-class", linestyle="--")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.legend()
    ax_acc.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def sweep_figure(rows: list[dict], swept_keys: list[str], metric: str, path) -> None:
    """One swept key: a line plot. Two: a grid colored by the metric."""
    if not rows:
        raise UsageError("no sweep results to plot")
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if len(swept_keys) == 1:
        key = swept_keys[0]
        pairs = sorted((row[key], row[metric]) for row in rows)
        ax.plot([p[0] for p in pairs], [p[1] for p in pairs], marker="o")
        ax.set_xlabel(key)
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
    elif len(swept_keys) == 2:
        kx, ky = swept_keys
        xs = sorted({row[kx] for row in rows})
        ys = sorted({row[ky] for row in rows})
        grid = np.full((len(ys), len(xs)), np.nan)
        for row in rows:
            grid[ys.index(row[ky]), xs.index(row[kx])] = row[metric]
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(xs)), [str(x) for x in xs])
        ax.set_yticks(range(len(ys)), [str(y) for y in ys])
        ax.set_xlabel(kx)
        ax.set_ylabel(ky)
        for i in range(len(ys)):
            for j in range(len(xs)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center",
                            color="white", fontsize=8)
        fig.colorbar(im, ax=ax, label=metric)
    else:
        raise UsageError(f"can plot 1 or 2 swept keys, got {len(swept_keys)}")
    ax.set_title(f"{metric} over {', '.join(swept_keys)}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def heatmap_montage(panels: list[np.ndarray], path, columns: int = 4,
                    titles: list[str] | None = None) -> None:
    """Tile rendered (h, w, 3) overlays into one figure."""
    if not panels:
        raise UsageError("no heatmaps to tile")
    columns = min(columns, len(panels))
    rows = (len(panels) + columns - 1) // columns
    fig, axes = plt.subplots(rows, columns, figsize=(2.6 * columns, 2.8 * rows),
                             squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < len(panels):
            ax.imshow(np.clip(panels[i], 0.0, 1.0))
            if titles is not None and i < len(titles):
                ax.set_title(titles[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def per_class_bars(per_class_accuracy: np.ndarray, class_names, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(class_names)), 3.6))
    ax.bar(range(len(class_names)), per_class_accuracy, color="tab:blue")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("accuracy")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
