"""Independent scalar reference implementations used as test oracles.

Everything here is written as plain double loops over pixels with
math.fsum accumulation, deliberately sharing no code with the package.
"""
from __future__ import annotations

import math

import numpy as np


def tagl_scalar(p_bg, p_sg, tau: float, adaptive: bool = True):
    """Gated coupling loss evaluated term by term with exact summation."""
    p_bg = np.asarray(p_bg, dtype=float)
    p_sg = np.asarray(p_sg, dtype=float)
    h, w = p_bg.shape
    n = h * w
    c_bg = math.fsum(p_bg[i, j] for i in range(h) for j in range(w)) / n
    c_sg = math.fsum(p_sg[i, j] for i in range(h) for j in range(w)) / n
    if adaptive:
        x = c_bg - c_sg
        q = 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
    else:
        q = 1.0
    terms = []
    for i in range(h):
        for j in range(w):
            g = 1.0 if p_bg[i, j] > tau else 0.0
            d = abs(p_sg[i, j] - p_bg[i, j])
            terms.append(g * q * d)
    return math.fsum(terms) / n


def central_diff(f, x, eps: float = 1e-5):
    """Centered finite differences of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    xf, gf = x.reshape(-1), g.reshape(-1)
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + eps
        fp = f(x)
        xf[k] = orig - eps
        fm = f(x)
        xf[k] = orig
        gf[k] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(analytic, numeric) -> float:
    numeric = np.asarray(numeric, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


def cross_entropy_scalar(logits, target) -> float:
    """Mean -ln softmax(logits)[target], pixel by pixel."""
    logits = np.asarray(logits, dtype=float)
    target = np.asarray(target)
    c, h, w = logits.shape
    losses = []
    for i in range(h):
        for j in range(w):
            z = [logits[k, i, j] for k in range(c)]
            m = max(z)
            lse = m + math.log(math.fsum(math.exp(v - m) for v in z))
            losses.append(lse - z[target[i, j]])
    return math.fsum(losses) / (h * w)


def bce_scalar(prob, target, clip: float = 1e-7) -> float:
    prob = np.asarray(prob, dtype=float)
    target = np.asarray(target)
    h, w = prob.shape
    losses = []
    for i in range(h):
        for j in range(w):
            p = min(max(prob[i, j], clip), 1.0 - clip)
            t = float(target[i, j])
            losses.append(-(t * math.log(p) + (1.0 - t) * math.log(1.0 - p)))
    return math.fsum(losses) / (h * w)


def soft_dice_loss_scalar(prob, target, s: float) -> float:
    prob = np.asarray(prob, dtype=float)
    target = np.asarray(target, dtype=float)
    inter = math.fsum((prob * target).reshape(-1).tolist())
    total = math.fsum(prob.reshape(-1).tolist()) + math.fsum(target.reshape(-1).tolist())
    if total + s == 0.0:
        return 0.0
    return 1.0 - (2.0 * inter + s) / (total + s)


def dice_iou_from_sets(pred, target, classes: int):
    """Per-class Dice and IoU from explicit pixel-coordinate sets."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    h, w = pred.shape
    dice, iou = [], []
    for c in range(classes):
        pset = {(i, j) for i in range(h) for j in range(w) if pred[i, j] == c}
        tset = {(i, j) for i in range(h) for j in range(w) if target[i, j] == c}
        inter = len(pset & tset)
        if len(pset) + len(tset) == 0:
            dice.append(1.0)
            iou.append(1.0)
        else:
            dice.append(2.0 * inter / (len(pset) + len(tset)))
            union = len(pset | tset)
            iou.append(inter / union if union else 1.0)
    return dice, iou
