"""Territory-aware gated loss coupling paired BG/SG infarct probability maps.

The penalty at each pixel is gate * q * |p_sg - p_bg|, where the gate opens
where the BG map exceeds a threshold tau and q is a two-way softmax of the
slice-level mean confidences (computed in sigmoid form). The loss is the
spatial average of the penalty map; the training objective adds it to a
standard segmentation loss with weight lam.

Gradients treat the gate indicator as a constant (zero subgradient through
the threshold) and take sign(0) = 0 at the disagreement kink; gradient flow
through q and the disagreement term is exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridmap import BinaryMask, ProbMap, ValidationError


@dataclass(frozen=True)
class TaglConfig:
    tau: float = 0.05
    lam: float = 1.0
    adaptive_weight_enabled: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.tau) and 0.0 <= self.tau < 1.0):
            raise ValidationError(f"tau must lie in [0, 1), got {self.tau!r}")
        if not (np.isfinite(self.lam) and self.lam >= 0.0):
            raise ValidationError(f"lam must be >= 0, got {self.lam!r}")


@dataclass(frozen=True)
class TaglBreakdown:
    gate: BinaryMask
    c_bg: float
    c_sg: float
    q: float
    penalty_map: np.ndarray = field(repr=False)
    loss: float


@dataclass(frozen=True)
class TotalLoss:
    total: float
    seg: float
    ta: float

    def decomposition(self) -> dict[str, float]:
        return {"seg": self.seg, "ta": self.ta}


def _stable_sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def gate(p_bg: ProbMap, tau: float) -> BinaryMask:
    """Binary gate: 1 where p_bg strictly exceeds tau."""
    if not isinstance(p_bg, ProbMap):
        raise ValidationError("gate expects a ProbMap")
    if not (np.isfinite(tau) and 0.0 <= tau < 1.0):
        raise ValidationError(f"tau must lie in [0, 1), got {tau!r}")
    return BinaryMask(p_bg.shape, (p_bg.values > tau).astype(np.uint8))


def slice_confidence(p: ProbMap) -> float:
    """Slice-level confidence: mean probability over all pixels."""
    if not isinstance(p, ProbMap):
        raise ValidationError("slice_confidence expects a ProbMap")
    return float(p.values.mean())


def adaptive_weight(c_bg: float, c_sg: float) -> float:
    """Two-way softmax exp(c_bg) / (exp(c_bg) + exp(c_sg)), computed as the
    numerically stable sigmoid of c_bg - c_sg."""
    if not (np.isfinite(c_bg) and np.isfinite(c_sg)):
        raise ValidationError("adaptive_weight expects finite confidences")
    return _stable_sigmoid(float(c_bg) - float(c_sg))


def tagl_arrays(
    p_bg: np.ndarray, p_sg: np.ndarray, tau: float, adaptive: bool
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, float, float, float]:
    """Forward + backward of the gated loss on raw float64 arrays.

    Returns (loss, grad_bg, grad_sg, penalty_map, c_bg, c_sg, q). Shared by
    the typed operations below and the training hot path.
    """
    n = p_bg.size
    g = p_bg > tau
    diff = p_sg - p_bg
    d = np.abs(diff)
    c_bg = float(p_bg.mean())
    c_sg = float(p_sg.mean())
    q = _stable_sigmoid(c_bg - c_sg) if adaptive else 1.0
    gd = np.where(g, d, 0.0)
    penalty = q * gd
    loss = float(penalty.mean())

    sgn = np.where(g, np.sign(diff), 0.0)
    grad_sg = (q / n) * sgn
    grad_bg = -grad_sg
    if adaptive:
        # q = sigmoid(c_bg - c_sg); dq/dc_bg = q(1-q), dq/dc_sg = -q(1-q)
        s = float(gd.sum())
        dq_term = (s / n) * q * (1.0 - q) / n
        grad_bg = grad_bg + dq_term
        grad_sg = grad_sg - dq_term
    return loss, grad_bg, grad_sg, penalty, c_bg, c_sg, q


def _check_pair(p_bg, p_sg) -> None:
    if not isinstance(p_bg, ProbMap) or not isinstance(p_sg, ProbMap):
        raise ValidationError("expected a (ProbMap, ProbMap) pair")
    if p_bg.shape != p_sg.shape:
        raise ValidationError(
            f"BG/SG shape mismatch: {p_bg.shape.as_tuple()} vs {p_sg.shape.as_tuple()}"
        )


def tagl_loss(p_bg: ProbMap, p_sg: ProbMap, cfg: TaglConfig) -> TaglBreakdown:
    """Evaluate the gated loss, returning every intermediate for inspection."""
    _check_pair(p_bg, p_sg)
    loss, _, _, penalty, c_bg, c_sg, q = tagl_arrays(
        p_bg.values, p_sg.values, cfg.tau, cfg.adaptive_weight_enabled
    )
    return TaglBreakdown(
        gate=gate(p_bg, cfg.tau),
        c_bg=c_bg,
        c_sg=c_sg,
        q=q,
        penalty_map=penalty,
        loss=loss,
    )


def tagl_grad(p_bg: ProbMap, p_sg: ProbMap, cfg: TaglConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the gated loss with respect to both probability maps."""
    _check_pair(p_bg, p_sg)
    _, grad_bg, grad_sg, _, _, _, _ = tagl_arrays(
        p_bg.values, p_sg.values, cfg.tau, cfg.adaptive_weight_enabled
    )
    return grad_bg, grad_sg


def total_loss(seg, p_bg: ProbMap, p_sg: ProbMap, cfg: TaglConfig) -> TotalLoss:
    """Combined objective seg + lam * gated loss.

    ``seg`` is either the scalar segmentation loss or the (loss, grad) pair
    returned by the losses module; only the scalar enters the total.
    """
    seg_value = float(seg[0]) if isinstance(seg, tuple) else float(seg)
    breakdown = tagl_loss(p_bg, p_sg, cfg)
    ta = breakdown.loss
    return TotalLoss(total=seg_value + cfg.lam * ta, seg=seg_value, ta=ta)
