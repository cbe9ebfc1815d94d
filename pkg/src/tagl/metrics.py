"""Evaluation metrics: per-class Dice and IoU from confusion counts, soft Dice
for validation-time selection, and a BG/SG consistency score.

Hard metrics run on argmax label maps; classes absent from both prediction
and target score 1.0 by default (configurable via ``skip_absent``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridmap import BinaryMask, LabelMap, ProbMap, ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    classes: int
    npixels: int
    tp: np.ndarray = field(repr=False)
    fp: np.ndarray = field(repr=False)
    fn: np.ndarray = field(repr=False)
    tn: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class EvalReport:
    per_class_dice: list[float]
    mean_dice: float
    per_class_iou: list[float]
    mean_iou: float
    consistency: float

    def to_dict(self) -> dict:
        return {
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "consistency": self.consistency,
            "per_class_dice": list(self.per_class_dice),
            "per_class_iou": list(self.per_class_iou),
        }


def confusion(pred: LabelMap, target: LabelMap) -> ConfusionCounts:
    """Exact per-class TP/FP/FN/TN pixel counts."""
    if not isinstance(pred, LabelMap) or not isinstance(target, LabelMap):
        raise ValidationError("confusion expects (LabelMap, LabelMap)")
    if pred.shape != target.shape or pred.classes != target.classes:
        raise ValidationError("confusion: shape/class mismatch")
    c = pred.classes
    joint = np.bincount(
        (pred.values.reshape(-1) * c + target.values.reshape(-1)).astype(np.int64),
        minlength=c * c,
    ).reshape(c, c)
    tp = np.diag(joint).astype(np.int64)
    fp = joint.sum(axis=1) - tp  # predicted c, target other
    fn = joint.sum(axis=0) - tp  # target c, predicted other
    n = pred.shape.npixels
    tn = n - tp - fp - fn
    return ConfusionCounts(classes=c, npixels=n, tp=tp, fp=fp, fn=fn, tn=tn)


def dice_per_class(counts: ConfusionCounts) -> list[float]:
    """2TP / (2TP + FP + FN); 1.0 when the class is absent from both maps."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    out = np.ones(counts.classes, dtype=np.float64)
    nz = denom > 0
    out[nz] = 2.0 * counts.tp[nz] / denom[nz]
    return out.tolist()


def iou_per_class(counts: ConfusionCounts) -> list[float]:
    """TP / (TP + FP + FN); 1.0 when the class is absent from both maps."""
    denom = counts.tp + counts.fp + counts.fn
    out = np.ones(counts.classes, dtype=np.float64)
    nz = denom > 0
    out[nz] = counts.tp[nz] / denom[nz]
    return out.tolist()


def absent_classes(counts: ConfusionCounts) -> np.ndarray:
    """Boolean flags for classes with no pixel in prediction or target."""
    return (2 * counts.tp + counts.fp + counts.fn) == 0


def soft_dice_coefficient(prob: ProbMap, target: BinaryMask, smoothing: float = 1.0) -> float:
    """(2*sum(p*t) + s) / (sum(p) + sum(t) + s); complement of the soft Dice loss."""
    if not isinstance(prob, ProbMap) or not isinstance(target, BinaryMask):
        raise ValidationError("soft_dice_coefficient expects (ProbMap, BinaryMask)")
    if prob.shape != target.shape:
        raise ValidationError("soft_dice_coefficient: shape mismatch")
    t = target.values.astype(np.float64)
    num = 2.0 * float((prob.values * t).sum()) + smoothing
    den = float(prob.values.sum()) + float(t.sum()) + smoothing
    if den == 0.0:
        return 1.0
    return num / den


def bg_sg_consistency(pred_bg: ProbMap, pred_sg: ProbMap, tau: float) -> float:
    """1 - mean absolute BG/SG disagreement over gated pixels; 1.0 when the
    gate is empty."""
    if not isinstance(pred_bg, ProbMap) or not isinstance(pred_sg, ProbMap):
        raise ValidationError("bg_sg_consistency expects (ProbMap, ProbMap)")
    if pred_bg.shape != pred_sg.shape:
        raise ValidationError("bg_sg_consistency: shape mismatch")
    g = pred_bg.values > tau
    if not g.any():
        return 1.0
    d = np.abs(pred_sg.values - pred_bg.values)[g]
    return float(1.0 - d.mean())


def build_report(
    counts: ConfusionCounts, consistency: float, skip_absent: bool = False
) -> EvalReport:
    """Assemble an EvalReport from confusion counts.

    With ``skip_absent`` the means ignore classes absent from both maps
    (their per-class entries remain 1.0 in the lists).
    """
    dice = np.asarray(dice_per_class(counts))
    iou = np.asarray(iou_per_class(counts))
    if skip_absent:
        keep = ~absent_classes(counts)
        mean_dice = float(dice[keep].mean()) if keep.any() else 1.0
        mean_iou = float(iou[keep].mean()) if keep.any() else 1.0
    else:
        mean_dice = float(dice.mean())
        mean_iou = float(iou.mean())
    return EvalReport(
        per_class_dice=dice.tolist(),
        mean_dice=mean_dice,
        per_class_iou=iou.tolist(),
        mean_iou=mean_iou,
        consistency=float(consistency),
    )
