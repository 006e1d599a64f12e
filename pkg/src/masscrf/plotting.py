"""PNG figures for evaluation reports (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GT_COLOR = "red"
PRED_COLOR = "lime"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def contour_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray, path, title: str = "") -> Path:
    """Grey image with the groundtruth contour in red and the prediction contour in green."""
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    # a flat mask has no 0.5 level crossing; contour() would only warn
    if gt.min() != gt.max():
        ax.contour(gt.astype(float), levels=[0.5], colors=GT_COLOR, linewidths=1.2)
    if pred.min() != pred.max():
        ax.contour(pred.astype(float), levels=[0.5], colors=PRED_COLOR, linewidths=1.2)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def trimap_curve(widths, accuracy, path, label: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(list(widths), [100.0 * a for a in accuracy], marker="o", label=label or None)
    ax.set_xlabel("trimap width (pixels)")
    ax.set_ylabel("accuracy (%)")
    ax.set_xticks(list(widths))
    ax.grid(alpha=0.3)
    if label:
        ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def loss_curve(epochs, losses, dices, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(list(epochs), list(losses), color="C0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss", color="C0")
    twin = ax.twinx()
    twin.plot(list(epochs), list(dices), color="C1")
    twin.set_ylabel("train Dice", color="C1")
    return _save(fig, path)
