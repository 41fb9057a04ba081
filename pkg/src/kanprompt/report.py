"""File-only figure rendering: loss curves, IOU bars, qualitative panels."""

import colorsys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def label_palette(k: int) -> np.ndarray:
    """[k, 3] display colors; background stays dark."""
    colors = [(0.15, 0.15, 0.15)]
    for c in range(1, k):
        hue = (0.12 + 0.381966 * (c - 1)) % 1.0
        colors.append(colorsys.hsv_to_rgb(hue, 0.85, 0.95))
    return np.array(colors[:k])


def colorize_labels(labels: np.ndarray, k: int) -> np.ndarray:
    return label_palette(k)[labels]


def plot_loss_curve(history, path) -> None:
    epochs = [row.epoch for row in history]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, [row.train_loss for row in history], color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [row.val_mean_iou for row in history], color="tab:orange", label="val mean IOU")
    ax2.set_ylabel("val mean IOU", color="tab:orange")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_iou_bars(report, path) -> None:
    k = report.k
    xs = np.arange(k)
    fig, ax = plt.subplots(figsize=(1.2 * k + 3, 4))
    ax.bar(xs - 0.18, report.per_class_dsc, width=0.36, label="DSC")
    ax.bar(xs + 0.18, report.per_class_iou, width=0.36, label="IOU")
    ax.set_xticks(xs, [f"class {c}" for c in range(k)])
    ax.set_ylim(0, 1.05)
    ax.axhline(report.mean_iou, color="gray", linestyle="--", linewidth=1, label="mean IOU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_panels(images, gt_labels, pred_labels, k: int, path) -> None:
    """Side-by-side rows: input image, ground truth, prediction."""
    n = len(images)
    fig, axes = plt.subplots(n, 3, figsize=(8, 2.6 * n), squeeze=False)
    for i in range(n):
        panels = [
            (np.transpose(np.asarray(images[i]), (1, 2, 0)), "input"),
            (colorize_labels(np.asarray(gt_labels[i]), k), "ground truth"),
            (colorize_labels(np.asarray(pred_labels[i]), k), "prediction"),
        ]
        for j, (img, title) in enumerate(panels):
            axes[i, j].imshow(np.clip(img, 0, 1))
            axes[i, j].set_axis_off()
            if i == 0:
                axes[i, j].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
