"""Voxelwise segmentation metrics: per-class IoU / Dice / recall and accuracy.

All metrics are computed from integer confusion counts so results are exact.
Per-class scores use the 0/0 -> 1 convention (a class absent from both
prediction and ground truth is scored perfect). Aggregate means exclude the
background class 0; accuracy is over all voxels. Reported values are percent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def confusion_counts(pred: np.ndarray, target: np.ndarray, class_count: int) -> np.ndarray:
    """Per-class [TP, FP, FN, TN] counts, shape (class_count, 4).

    For every class, TP + FP + FN + TN equals the total voxel count.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    for name, a in (("pred", pred), ("target", target)):
        if a.size and (a.min() < 0 or a.max() >= class_count):
            raise ValueError(f"{name} labels outside [0, {class_count})")
    # joint histogram of (target, pred) pairs; row sums = target counts, col sums = pred counts
    joint = np.bincount(
        (target.ravel().astype(np.int64) * class_count + pred.ravel().astype(np.int64)),
        minlength=class_count * class_count,
    ).reshape(class_count, class_count)
    tp = np.diag(joint)
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return np.stack([tp, fp, fn, tn], axis=1)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise num/den with the 0/0 -> 1 convention."""
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.ones_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


@dataclass(frozen=True)
class SegmentationScores:
    """Per-class and aggregate metrics, all in percent."""

    iou: np.ndarray        # (class_count,)
    dice: np.ndarray       # (class_count,)
    recall: np.ndarray     # (class_count,)
    mean_iou: float        # mean over classes 1..C-1
    mean_dice: float
    mean_recall: float
    accuracy: float        # all-voxel, all-class

    def as_dict(self) -> dict:
        return {
            "iou_per_class": [float(x) for x in self.iou],
            "dice_per_class": [float(x) for x in self.dice],
            "recall_per_class": [float(x) for x in self.recall],
            "mean_iou": self.mean_iou,
            "mean_dice": self.mean_dice,
            "mean_recall": self.mean_recall,
            "accuracy": self.accuracy,
        }


def evaluate_segmentation(
    pred: np.ndarray, target: np.ndarray, class_count: int
) -> SegmentationScores:
    """Score a predicted label grid against ground truth.

    Multi-volume evaluation: pass concatenated (stacked) grids, i.e. counts
    are pooled over volumes before ratios are taken.
    """
    counts = confusion_counts(pred, target, class_count)
    tp, fp, fn = counts[:, 0], counts[:, 1], counts[:, 2]
    iou = _safe_ratio(tp, tp + fp + fn)
    dice = _safe_ratio(2 * tp, 2 * tp + fp + fn)
    recall = _safe_ratio(tp, tp + fn)
    total = np.asarray(pred).size
    # all-voxel accuracy: each correctly classified voxel is the TP of its true class
    accuracy = float(tp.sum()) / total if total else 1.0
    return SegmentationScores(
        iou=iou * 100.0,
        dice=dice * 100.0,
        recall=recall * 100.0,
        mean_iou=float(iou[1:].mean()) * 100.0,
        mean_dice=float(dice[1:].mean()) * 100.0,
        mean_recall=float(recall[1:].mean()) * 100.0,
        accuracy=accuracy * 100.0,
    )
