"""Central finite-difference verification of every analytic gradient.

Each suite perturbs one input element at a time with a centered step and
compares against the analytic gradient. The reported error is
max|analytic - numeric| / max(max|numeric|, 1e-12), a scale-normalized
worst-case error that stays meaningful when individual components vanish.

Gated-loss instances are resampled so no pixel sits within 1e-3 of the gate
threshold or of zero disagreement (the loss is nondifferentiable there).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aspects import LEVEL_BG, LEVEL_SG, TerritoryAtlas, territory_ids_for_level
from .gated import TaglConfig, tagl_arrays
from .gridmap import BinaryMask, GridShape, Image, LabelMap
from .losses import bce_arrays, ce_arrays, dice_arrays
from .phantom import LevelSlice, PairedCase
from .trainer import NUM_CLASSES, NUM_FEATURES, LinearHead, TrainConfig, batch_objective

KINK_MARGIN = 1e-3
MAX_RESAMPLES = 200


def central_difference(f, x: np.ndarray, eps: float) -> np.ndarray:
    """Centered finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


@dataclass(frozen=True)
class SuiteResult:
    suite: str
    trials: int
    worst_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance


def _check_ce(rng, size, eps):
    c = 3
    logits = rng.normal(0.0, 2.0, size=(c, size, size))
    target = rng.integers(0, c, size=(size, size))
    _, grad = ce_arrays(logits, target)
    num = central_difference(lambda z: ce_arrays(z, target)[0], logits, eps)
    return relative_error(grad, num)


def _check_bce(rng, size, eps):
    prob = rng.uniform(0.1, 0.9, size=(size, size))
    target = rng.integers(0, 2, size=(size, size)).astype(np.uint8)
    _, grad = bce_arrays(prob, target)
    num = central_difference(lambda q: bce_arrays(q, target)[0], prob, eps)
    return relative_error(grad, num)


def _check_dice(rng, size, eps):
    prob = rng.uniform(0.1, 0.9, size=(size, size))
    target = rng.integers(0, 2, size=(size, size)).astype(np.uint8)
    _, grad = dice_arrays(prob, target, 1.0)
    num = central_difference(lambda q: dice_arrays(q, target, 1.0)[0], prob, eps)
    return relative_error(grad, num)


def sample_tagl_pair(rng, size: int, tau: float, margin: float = KINK_MARGIN):
    """Random (p_bg, p_sg) with every pixel away from the gate threshold and
    from zero disagreement."""
    for _ in range(MAX_RESAMPLES):
        p_bg = rng.uniform(0.0, 1.0, size=(size, size))
        p_sg = rng.uniform(0.0, 1.0, size=(size, size))
        if np.abs(p_bg - tau).min() > margin and np.abs(p_sg - p_bg).min() > margin:
            return p_bg, p_sg
    raise RuntimeError("could not sample a gated-loss instance away from the kinks")


def _check_tagl(rng, size, eps):
    tau = 0.05
    p_bg, p_sg = sample_tagl_pair(rng, size, tau)
    _, g_bg, g_sg, _, _, _, _ = tagl_arrays(p_bg, p_sg, tau, True)
    num_bg = central_difference(lambda a: tagl_arrays(a, p_sg, tau, True)[0], p_bg, eps)
    num_sg = central_difference(lambda a: tagl_arrays(p_bg, a, tau, True)[0], p_sg, eps)
    return max(relative_error(g_bg, num_bg), relative_error(g_sg, num_sg))


def toy_atlas(level: str, shape: GridShape, rng) -> TerritoryAtlas:
    """Tiny handmade atlas: two pixels per territory, disjoint by shuffling."""
    ids = territory_ids_for_level(level)
    h, w = shape.as_tuple()
    order = rng.permutation(h * w)
    masks = {}
    for i, tid in enumerate(ids):
        m = np.zeros(h * w, dtype=np.uint8)
        m[order[2 * i : 2 * i + 2]] = 1
        masks[tid] = BinaryMask(shape, m.reshape(h, w))
    return TerritoryAtlas(level=level, shape=shape, masks=masks)


def toy_case(rng, size: int = 8) -> PairedCase:
    """Random paired case on a small grid for end-to-end gradient checks."""
    shape = GridShape(size, size)
    slices = {}
    for key, level in (("bg", LEVEL_BG), ("sg", LEVEL_SG)):
        atlas = toy_atlas(level, shape, rng)
        img = Image(shape, rng.normal(0.5, 0.2, size=shape.as_tuple()))
        allowed = np.array([0, *territory_ids_for_level(level)])
        labels = LabelMap(shape, NUM_CLASSES, allowed[rng.integers(0, len(allowed), size=shape.as_tuple())])
        slices[key] = LevelSlice(img, labels, atlas)
    return PairedCase("toy", slices["bg"], slices["sg"])


def _check_train_step(rng, size, eps, cfg: TrainConfig):
    for _ in range(MAX_RESAMPLES):
        case = toy_case(rng, size)
        head = LinearHead(rng.normal(0.0, 0.5, size=(NUM_FEATURES, NUM_CLASSES)))
        _, _, _, grad_w, _, _ = batch_objective(head, [case], cfg)
        if cfg.tagl.lam != 0.0:
            from .trainer import _predict_arrays

            sbg, ssg = _predict_arrays(head, case)
            p_bg, p_sg = 1.0 - sbg[0], 1.0 - ssg[0]
            if (
                np.abs(p_bg - cfg.tagl.tau).min() <= KINK_MARGIN
                or np.abs(p_sg - p_bg).min() <= KINK_MARGIN
            ):
                continue

        def loss_of(w):
            return batch_objective(LinearHead(w, head.cd_scale), [case], cfg)[0]

        num = central_difference(loss_of, head.weights, eps)
        return relative_error(grad_w, num)
    raise RuntimeError("could not sample an end-to-end instance away from the kinks")


def run_suites(
    sizes=(4, 8),
    trials: int = 200,
    eps: float = 1e-5,
    tolerance: float = 1e-5,
    seed: int = 0,
    end_to_end_eps: float = 1e-4,
    end_to_end_tolerance: float = 1e-4,
) -> list[SuiteResult]:
    """Run every gradient suite; ``trials`` instances per suite, spread over
    the requested grid sizes."""
    rng = np.random.default_rng(seed)
    results = []
    checks = [
        ("cross_entropy", _check_ce, eps, tolerance),
        ("binary_cross_entropy", _check_bce, eps, tolerance),
        ("soft_dice", _check_dice, eps, tolerance),
        ("tagl", _check_tagl, eps, tolerance),
    ]
    for name, fn, e, tol in checks:
        worst = 0.0
        for t in range(trials):
            size = sizes[t % len(sizes)]
            worst = max(worst, fn(rng, size, e))
        results.append(SuiteResult(name, trials, worst, tol))

    e2e_cfgs = [
        ("train_step_ce", TrainConfig(tagl=TaglConfig(lam=0.0))),
        ("train_step_ce_tagl", TrainConfig(tagl=TaglConfig(lam=1.0))),
        ("train_step_ce_tagl_fixedq", TrainConfig(tagl=TaglConfig(lam=1.0, adaptive_weight_enabled=False))),
    ]
    e2e_trials = max(1, trials // 3)
    for name, cfg in e2e_cfgs:
        worst = 0.0
        for t in range(e2e_trials):
            size = max(sizes)
            worst = max(worst, _check_train_step(rng, size, end_to_end_eps, cfg))
        results.append(SuiteResult(name, e2e_trials, worst, end_to_end_tolerance))
    return results
