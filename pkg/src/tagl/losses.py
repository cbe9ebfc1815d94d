"""Pixel-wise segmentation objectives with analytic gradients.

Each public operation returns ``(loss, grad)`` where ``grad`` is the exact
derivative of the scalar loss with respect to the operation's input field
(logits for the cross-entropy family, probabilities for the binary family).
Gradients are plain float64 arrays shaped like the input values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridmap import (
    BinaryMask,
    LabelMap,
    LogitStack,
    ProbMap,
    ValidationError,
    softmax_channels,
)

BCE_CLIP = 1e-7

SEG_LOSS_KINDS = ("CE", "BCE", "DICE", "BCE_DICE", "CE_DICE")
_STACK_KINDS = ("CE", "CE_DICE")


@dataclass(frozen=True)
class SegLossSpec:
    """Composition of the pixel-wise segmentation objective.

    ``bce_dice_mix`` is the weight on the cross-entropy term of a hybrid;
    the Dice term gets ``1 - bce_dice_mix``.
    """

    kind: str = "CE"
    dice_smoothing: float = 1.0
    bce_dice_mix: float = 0.5

    def __post_init__(self):
        if self.kind not in SEG_LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {self.kind!r}, expected one of {SEG_LOSS_KINDS}")
        if not (np.isfinite(self.dice_smoothing) and self.dice_smoothing >= 0):
            raise ValidationError("dice_smoothing must be >= 0")
        if not (0.0 <= self.bce_dice_mix <= 1.0):
            raise ValidationError("bce_dice_mix must lie in [0, 1]")

    @property
    def takes_logits(self) -> bool:
        return self.kind in _STACK_KINDS


def softmax_vjp(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Backward pass of a channel-axis softmax: J^T @ upstream, per pixel."""
    dot = (probs * upstream).sum(axis=0, keepdims=True)
    return probs * (upstream - dot)


def ce_arrays(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. logits, both on raw arrays.

    logits: (C, ...) float array; target: integer array matching the trailing
    dims. grad = (softmax - onehot) / npixels.
    """
    c = logits.shape[0]
    z = logits.reshape(c, -1)
    y = target.reshape(-1)
    n = z.shape[1]
    zmax = z.max(axis=0)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=0)
    cols = np.arange(n)
    logp_target = (z[y, cols] - zmax) - np.log(sez)
    loss = float(-logp_target.mean())
    grad = ez / sez
    grad[y, cols] -= 1.0
    grad /= n
    return loss, grad.reshape(logits.shape)


def cross_entropy(logits: LogitStack, target: LabelMap) -> tuple[float, np.ndarray]:
    """Mean over pixels of -ln P(target class) under the stabilized softmax."""
    if not isinstance(logits, LogitStack) or not isinstance(target, LabelMap):
        raise ValidationError("cross_entropy expects (LogitStack, LabelMap)")
    if logits.shape != target.shape or logits.classes != target.classes:
        raise ValidationError(
            f"cross_entropy: shape/class mismatch "
            f"({logits.classes}@{logits.shape.as_tuple()} vs {target.classes}@{target.shape.as_tuple()})"
        )
    return ce_arrays(logits.values, target.values)


def bce_arrays(prob: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    p = np.clip(prob, BCE_CLIP, 1.0 - BCE_CLIP)
    t = target.astype(np.float64)
    n = p.size
    loss = float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    grad = (p - t) / (p * (1.0 - p) * n)
    return loss, grad


def binary_cross_entropy(prob: ProbMap, target: BinaryMask) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy; probabilities are clamped to
    [1e-7, 1 - 1e-7] before the log, and the gradient is evaluated at the
    clamped value."""
    if not isinstance(prob, ProbMap) or not isinstance(target, BinaryMask):
        raise ValidationError("binary_cross_entropy expects (ProbMap, BinaryMask)")
    if prob.shape != target.shape:
        raise ValidationError("binary_cross_entropy: shape mismatch")
    return bce_arrays(prob.values, target.values)


def dice_arrays(prob: np.ndarray, target: np.ndarray, smoothing: float) -> tuple[float, np.ndarray]:
    t = target.astype(np.float64)
    num = 2.0 * float((prob * t).sum()) + smoothing
    den = float(prob.sum()) + float(t.sum()) + smoothing
    if den == 0.0:
        # only reachable with smoothing == 0 and empty prob and target
        return 0.0, np.zeros_like(prob)
    loss = 1.0 - num / den
    grad = (num - 2.0 * t * den) / (den * den)
    return float(loss), grad


def soft_dice_loss(prob: ProbMap, target: BinaryMask, smoothing: float = 1.0) -> tuple[float, np.ndarray]:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), gradient by the quotient rule."""
    if not isinstance(prob, ProbMap) or not isinstance(target, BinaryMask):
        raise ValidationError("soft_dice_loss expects (ProbMap, BinaryMask)")
    if prob.shape != target.shape:
        raise ValidationError("soft_dice_loss: shape mismatch")
    if not (np.isfinite(smoothing) and smoothing >= 0):
        raise ValidationError("soft_dice_loss: smoothing must be >= 0")
    return dice_arrays(prob.values, target.values, float(smoothing))


def multiclass_dice_arrays(
    probs: np.ndarray, target: np.ndarray, smoothing: float
) -> tuple[float, np.ndarray]:
    """Mean over all C classes of per-class soft Dice against one-hot targets.

    probs: (C, ...) softmax output; target: integer labels. Returns the loss
    and its gradient with respect to probs (not logits).
    """
    c = probs.shape[0]
    p = probs.reshape(c, -1)
    onehot = (target.reshape(1, -1) == np.arange(c)[:, None]).astype(np.float64)
    num = 2.0 * (p * onehot).sum(axis=1) + smoothing
    den = p.sum(axis=1) + onehot.sum(axis=1) + smoothing
    safe = den > 0.0
    loss_c = np.zeros(c)
    loss_c[safe] = 1.0 - num[safe] / den[safe]
    grad = np.zeros_like(p)
    grad[safe] = (num[safe, None] - 2.0 * onehot[safe] * den[safe, None]) / (den[safe, None] ** 2)
    grad /= c
    return float(loss_c.mean()), grad.reshape(probs.shape)


def seg_loss(spec: SegLossSpec, operand, target) -> tuple[float, np.ndarray]:
    """Dispatch the configured segmentation objective.

    CE / CE_DICE take (LogitStack, LabelMap) and differentiate w.r.t. logits;
    BCE / DICE / BCE_DICE take (ProbMap, BinaryMask) and differentiate w.r.t.
    the probability map. Hybrids return
    mix * (CE or BCE) + (1 - mix) * Dice with gradients summed accordingly.
    """
    if not isinstance(spec, SegLossSpec):
        raise ValidationError("seg_loss expects a SegLossSpec")
    if spec.takes_logits:
        if not isinstance(operand, LogitStack) or not isinstance(target, LabelMap):
            raise ValidationError(f"seg_loss kind {spec.kind}: expects (LogitStack, LabelMap)")
        if operand.shape != target.shape or operand.classes != target.classes:
            raise ValidationError("seg_loss: shape/class mismatch")
        if spec.kind == "CE":
            return ce_arrays(operand.values, target.values)
        ce_l, ce_g = ce_arrays(operand.values, target.values)
        probs = softmax_channels(operand.values)
        d_l, d_gp = multiclass_dice_arrays(probs, target.values, spec.dice_smoothing)
        m = spec.bce_dice_mix
        loss = m * ce_l + (1.0 - m) * d_l
        grad = m * ce_g + (1.0 - m) * softmax_vjp(probs, d_gp)
        return loss, grad

    if not isinstance(operand, ProbMap) or not isinstance(target, BinaryMask):
        raise ValidationError(f"seg_loss kind {spec.kind}: expects (ProbMap, BinaryMask)")
    if operand.shape != target.shape:
        raise ValidationError("seg_loss: shape mismatch")
    if spec.kind == "BCE":
        return bce_arrays(operand.values, target.values)
    if spec.kind == "DICE":
        return dice_arrays(operand.values, target.values, spec.dice_smoothing)
    b_l, b_g = bce_arrays(operand.values, target.values)
    d_l, d_g = dice_arrays(operand.values, target.values, spec.dice_smoothing)
    m = spec.bce_dice_mix
    return m * b_l + (1.0 - m) * d_l, m * b_g + (1.0 - m) * d_g
