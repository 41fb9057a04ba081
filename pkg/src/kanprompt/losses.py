"""Hybrid segmentation loss (dice + focal + IOU regression) and mask metrics."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.125
    beta: float = 0.01
    focal_gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.focal_gamma < 0.0:
            raise ValueError(f"focal gamma must be non-negative, got {self.focal_gamma}")


def _check_plane_shapes(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not match")


def dice_loss(pred_probs: Tensor, target: Tensor) -> Tensor:
    """Soft dice loss in [0, 1]: 1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps)."""
    pred_probs = torch.as_tensor(pred_probs)
    target = torch.as_tensor(target, dtype=pred_probs.dtype)
    _check_plane_shapes(pred_probs, target, "dice_loss")
    inter = (pred_probs * target).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (pred_probs.sum() + target.sum() + DICE_EPS)


def focal_loss(pred_logits: Tensor, target: Tensor, gamma: float = 2.0) -> Tensor:
    """Mean over pixels of -(1 - p_t)^gamma * log(p_t) with sigmoid probabilities.

    Computed from logits via logsigmoid so confident predictions stay stable.
    """
    pred_logits = torch.as_tensor(pred_logits)
    target = torch.as_tensor(target, dtype=pred_logits.dtype)
    _check_plane_shapes(pred_logits, target, "focal_loss")
    signed = torch.where(target > 0.5, pred_logits, -pred_logits)
    log_pt = F.logsigmoid(signed)
    one_minus_pt = torch.sigmoid(-signed)
    return (one_minus_pt**gamma * (-log_pt)).mean()


def iou_mse_loss(predicted_iou, actual_iou) -> Tensor:
    """Squared error between a predicted and an achieved IOU, both in [0, 1]."""
    predicted_iou = torch.as_tensor(predicted_iou)
    actual_iou = torch.as_tensor(actual_iou, dtype=predicted_iou.dtype)
    for name, v in (("predicted", predicted_iou), ("actual", actual_iou)):
        if v.ndim != 0:
            raise ValueError(f"{name} iou must be a scalar, got shape {tuple(v.shape)}")
        value = float(v.detach())
        if not (-1e-6 <= value <= 1.0 + 1e-6):
            raise ValueError(f"{name} iou must lie in [0, 1], got {value}")
    return (predicted_iou - actual_iou) ** 2


def _binary_iou(pred: Tensor, target: Tensor) -> float:
    inter = float((pred & target).sum())
    union = float((pred | target).sum())
    return 1.0 if union == 0 else inter / union


def hybrid_loss(out, target, weights: LossWeights = LossWeights()):
    """Sum over classes of (1-a)*dice + a*focal + b*iou_mse, plus the breakdown.

    `target` is an integer label map; plane i is trained against the one-hot of
    class i. The achieved IOU fed to the mse term uses masks thresholded at
    probability 0.5 and carries no gradient. Returns (total, [k, 3] breakdown)
    with columns (dice, focal, iou_mse).
    """
    logits = out.mask_logits
    target = torch.as_tensor(np.asarray(target)).long()
    if target.shape != logits.shape[1:]:
        raise ValueError(
            f"target shape {tuple(target.shape)} does not match mask planes {tuple(logits.shape[1:])}"
        )
    k = logits.shape[0]
    if int(target.max()) >= k:
        raise ValueError(f"target contains label {int(target.max())} but k={k}")
    rows = []
    for i in range(k):
        t = (target == i).to(logits.dtype)
        d = dice_loss(torch.sigmoid(logits[i]), t)
        f = focal_loss(logits[i], t, weights.focal_gamma)
        achieved = _binary_iou(logits[i].detach() > 0, target == i)
        m = iou_mse_loss(out.ious[i], achieved)
        rows.append(torch.stack([d, f, m]))
    breakdown = torch.stack(rows)
    total = (
        (1.0 - weights.alpha) * breakdown[:, 0]
        + weights.alpha * breakdown[:, 1]
        + weights.beta * breakdown[:, 2]
    ).sum()
    return total, breakdown


def batch_hybrid_loss(
    mask_logits: Tensor, iou_preds: Tensor, labels: Tensor, weights: LossWeights = LossWeights()
) -> Tensor:
    """Mean over a batch of per-sample hybrid losses, computed vectorized.

    Agrees with averaging `hybrid_loss` over the batch up to float reduction
    order.
    """
    b, k = mask_logits.shape[0], mask_logits.shape[1]
    if labels.shape != (b, *mask_logits.shape[2:]) or iou_preds.shape != (b, k):
        raise ValueError(
            f"inconsistent batch shapes: logits {tuple(mask_logits.shape)}, "
            f"ious {tuple(iou_preds.shape)}, labels {tuple(labels.shape)}"
        )
    classes = torch.arange(k, device=labels.device).view(1, k, 1, 1)
    onehot = (labels.unsqueeze(1) == classes).to(mask_logits.dtype)
    probs = torch.sigmoid(mask_logits)
    inter = (probs * onehot).sum(dim=(-2, -1))
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (probs.sum(dim=(-2, -1)) + onehot.sum(dim=(-2, -1)) + DICE_EPS)

    signed = torch.where(onehot > 0.5, mask_logits, -mask_logits)
    focal = (torch.sigmoid(-signed) ** weights.focal_gamma * (-F.logsigmoid(signed))).mean(dim=(-2, -1))

    with torch.no_grad():
        pred_bin = mask_logits > 0
        target_bin = onehot > 0.5
        bin_inter = (pred_bin & target_bin).sum(dim=(-2, -1)).to(mask_logits.dtype)
        bin_union = (pred_bin | target_bin).sum(dim=(-2, -1)).to(mask_logits.dtype)
        achieved = torch.where(bin_union > 0, bin_inter / bin_union.clamp(min=1.0), torch.ones_like(bin_union))
    mse = (iou_preds - achieved) ** 2

    per_sample = ((1.0 - weights.alpha) * dice + weights.alpha * focal + weights.beta * mse).sum(dim=1)
    return per_sample.mean()


def _as_bool_mask(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool:
        arr = arr.astype(bool)
    if arr.ndim < 1:
        raise ValueError(f"{name} must be an array mask")
    return arr


def dsc_metric(pred, gt) -> float:
    """Dice similarity 2|A&B| / (|A|+|B|); 1.0 when both masks are empty."""
    a = _as_bool_mask(pred, "pred")
    b = _as_bool_mask(gt, "gt")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes {a.shape} and {b.shape} do not match")
    inter = int(np.logical_and(a, b).sum())
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def iou_metric(pred, gt) -> float:
    """Jaccard index |A&B| / |A|B|; 1.0 when both masks are empty."""
    a = _as_bool_mask(pred, "pred")
    b = _as_bool_mask(gt, "gt")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes {a.shape} and {b.shape} do not match")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return 1.0 if union == 0 else inter / union


@dataclass
class MetricReport:
    """Per-class and mean DSC/IOU over an evaluated sample set."""

    per_class_dsc: list = field(default_factory=list)
    per_class_iou: list = field(default_factory=list)
    sample_count: int = 0

    def __post_init__(self):
        if len(self.per_class_dsc) != len(self.per_class_iou):
            raise ValueError("per-class DSC and IOU lists must have equal length")

    @property
    def k(self) -> int:
        return len(self.per_class_dsc)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.per_class_dsc))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.per_class_iou))

    def to_dict(self) -> dict:
        return {
            "per_class_dsc": [float(v) for v in self.per_class_dsc],
            "per_class_iou": [float(v) for v in self.per_class_iou],
            "mean_dsc": self.mean_dsc,
            "mean_iou": self.mean_iou,
            "sample_count": self.sample_count,
        }

    def to_csv(self, path) -> None:
        """One row per class plus a mean row."""
        lines = ["class,dsc,iou"]
        for i, (d, j) in enumerate(zip(self.per_class_dsc, self.per_class_iou)):
            lines.append(f"{i},{d!r},{j!r}")
        lines.append(f"mean,{self.mean_dsc!r},{self.mean_iou!r}")
        Path(path).write_text("\n".join(lines) + "\n")
