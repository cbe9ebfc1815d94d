"""Seeded generator of synthetic paired BG/SG cases with territory atlases.

Geometry: an elliptical brain with the MCA territory modeled as a fan on the
left side of the grid. At the BG level the fan splits into an inner band of
four deep territories (C, L, IC, I) and an outer cortical band of three
sectors (M1-M3). The SG level reuses the cortical band geometry for M4-M6,
so each Mk+3 sits directly over Mk on aligned slices (vascular continuity).

Lesions are drawn per territory; an infarcted Mk propagates to Mk+3 with
probability ``coupling_rho``. Infarcted pixels carry the territory class in
the label map and a fixed intensity drop in the image; everything else is
background class 0. Each case derives its own RNG stream from
(seed, case_index), so generation is reproducible and order-independent.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .aspects import (
    BG_TERRITORY_IDS,
    LEVEL_BG,
    LEVEL_SG,
    SG_TERRITORY_IDS,
    TERRITORY_BY_ID,
    TerritoryAtlas,
    territory_ids_for_level,
)
from .gridmap import BinaryMask, GridShape, Image, LabelMap, ValidationError

MIN_SIDE = 32
MIN_TERRITORY_PIXELS = 8

# intensity model
OUTSIDE_LEVEL = 0.05
TISSUE_LEVEL = 0.60

# elliptical radius bands (fractions of the brain semi-axes) and angular
# sectors in degrees, measured from the leftward direction
DEEP_BAND = (0.12, 0.52)
CORTEX_BAND = (0.52, 0.95)
DEEP_SECTOR_START, DEEP_SECTOR_STEP = -60.0, 30.0
CORTEX_SECTOR_START, CORTEX_SECTOR_STEP = -75.0, 50.0

M_BG_IDS = (5, 6, 7)  # M1..M3; Mk couples to Mk+3 (ids 8..10)


class GenerationError(RuntimeError):
    """Raised when a phantom cannot be generated for the requested geometry."""


@dataclass(frozen=True)
class PhantomConfig:
    shape: GridShape = GridShape(128, 128)
    coupling_rho: float = 0.8
    lesion_rate: float = 0.25
    noise_sigma: float = 0.02
    hypodensity_delta: float = 0.08
    seed: int = 0

    def __post_init__(self):
        for name in ("coupling_rho", "lesion_rate"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {v!r}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0.0):
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        if not np.isfinite(self.hypodensity_delta):
            raise ValidationError("hypodensity_delta must be finite")
        if not (0 <= int(self.seed) < 2**64):
            raise ValidationError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class LevelSlice:
    image: Image
    labels: LabelMap
    atlas: TerritoryAtlas


@dataclass(frozen=True)
class PairedCase:
    case_id: str
    bg: LevelSlice
    sg: LevelSlice
    truth_involved: frozenset[int] = field(default_factory=frozenset)

    @property
    def truth_score(self) -> int:
        return 10 - len(self.truth_involved)


def _sector_masks(shape: GridShape):
    h, w = shape.as_tuple()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ay, ax = 0.45 * h, 0.40 * w
    ys = (np.arange(h)[:, None] - cy) / ay
    xs = (np.arange(w)[None, :] - cx) / ax
    r = np.hypot(ys, xs)
    brain = r <= 1.0
    # angle from the leftward direction; (-90, 90) spans the left half-plane
    phi = np.degrees(np.arctan2(np.broadcast_to(ys, (h, w)), -np.broadcast_to(xs, (h, w))))
    return brain, r, phi


def _band_sectors(r, phi, brain, band, start, step, count):
    masks = []
    lo, hi = band
    in_band = brain & (r >= lo) & (r < hi)
    for k in range(count):
        a0 = start + k * step
        a1 = a0 + step
        masks.append(in_band & (phi >= a0) & (phi < a1))
    return masks


@lru_cache(maxsize=None)
def _atlas_cached(height: int, width: int, level: str):
    shape = GridShape(height, width)
    if height < MIN_SIDE or width < MIN_SIDE:
        raise GenerationError(f"shape must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")
    brain, r, phi = _sector_masks(shape)
    ids = territory_ids_for_level(level)
    if level == LEVEL_BG:
        sectors = _band_sectors(r, phi, brain, DEEP_BAND, DEEP_SECTOR_START, DEEP_SECTOR_STEP, 4)
        sectors += _band_sectors(r, phi, brain, CORTEX_BAND, CORTEX_SECTOR_START, CORTEX_SECTOR_STEP, 3)
    else:
        sectors = _band_sectors(r, phi, brain, CORTEX_BAND, CORTEX_SECTOR_START, CORTEX_SECTOR_STEP, 3)
    masks = {}
    for tid, sector in zip(ids, sectors):
        n = int(sector.sum())
        if n < MIN_TERRITORY_PIXELS:
            raise GenerationError(
                f"territory {TERRITORY_BY_ID[tid].name} has only {n} pixels at "
                f"{height}x{width}; need >= {MIN_TERRITORY_PIXELS}"
            )
        masks[tid] = BinaryMask(shape, sector.astype(np.uint8))
    atlas = TerritoryAtlas(level=level, shape=shape, masks=masks)
    brain_mask = BinaryMask(shape, brain.astype(np.uint8))
    return atlas, brain_mask


def build_atlas(shape: GridShape, level: str) -> tuple[TerritoryAtlas, BinaryMask]:
    """Deterministic territory atlas and brain mask for one level."""
    territory_ids_for_level(level)  # validates the level name
    return _atlas_cached(int(shape.height), int(shape.width), level)


def case_rng(seed: int, case_index: int) -> np.random.Generator:
    """Per-case RNG substream derived from (seed, case_index)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(case_index),)))


def _render_level(shape, atlas, brain, infarcted_ids, delta, sigma, rng):
    h, w = shape.as_tuple()
    labels = np.zeros((h, w), dtype=np.int64)
    for tid in infarcted_ids:
        labels[atlas.mask(tid).values.astype(bool)] = tid
    img = np.where(brain.values.astype(bool), TISSUE_LEVEL, OUTSIDE_LEVEL)
    img = img - delta * (labels > 0)
    img = img + sigma * rng.standard_normal((h, w))
    return Image(shape, img), LabelMap(shape, 11, labels)


def sample_case(cfg: PhantomConfig, case_index: int) -> PairedCase:
    """Draw one paired case; fully determined by (cfg.seed, case_index)."""
    bg_atlas, brain = build_atlas(cfg.shape, LEVEL_BG)
    sg_atlas, _ = build_atlas(cfg.shape, LEVEL_SG)
    rng = case_rng(cfg.seed, case_index)

    own = rng.random(10) < cfg.lesion_rate  # territory ids 1..10 in order
    couple = rng.random(3) < cfg.coupling_rho  # one draw per Mk regardless of outcome
    infarcted = {tid for tid, hit in zip(range(1, 11), own) if hit}
    for k, mk in enumerate(M_BG_IDS):
        if mk in infarcted and couple[k]:
            infarcted.add(mk + 3)

    bg_ids = sorted(infarcted & set(BG_TERRITORY_IDS))
    sg_ids = sorted(infarcted & set(SG_TERRITORY_IDS))
    bg_img, bg_lab = _render_level(
        cfg.shape, bg_atlas, brain, bg_ids, cfg.hypodensity_delta, cfg.noise_sigma, rng
    )
    sg_img, sg_lab = _render_level(
        cfg.shape, sg_atlas, brain, sg_ids, cfg.hypodensity_delta, cfg.noise_sigma, rng
    )
    return PairedCase(
        case_id=f"c{case_index:05d}",
        bg=LevelSlice(bg_img, bg_lab, bg_atlas),
        sg=LevelSlice(sg_img, sg_lab, sg_atlas),
        truth_involved=frozenset(infarcted),
    )


@dataclass(frozen=True)
class SplitDataset:
    config: PhantomConfig
    train: tuple[PairedCase, ...]
    val: tuple[PairedCase, ...]
    test: tuple[PairedCase, ...]

    def all_cases(self) -> tuple[PairedCase, ...]:
        return self.train + self.val + self.test

    def split(self, name: str) -> tuple[PairedCase, ...]:
        if name not in ("train", "val", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return getattr(self, name)


def generate_dataset(cfg: PhantomConfig, n_train: int, n_val: int, n_test: int) -> SplitDataset:
    """Sample consecutive case indices into train/val/test splits."""
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 0:
            raise ValidationError(f"{name} must be >= 0")
    cases = [sample_case(cfg, i) for i in range(n_train + n_val + n_test)]
    return SplitDataset(
        config=cfg,
        train=tuple(cases[:n_train]),
        val=tuple(cases[n_train : n_train + n_val]),
        test=tuple(cases[n_train + n_val :]),
    )


def _flip_atlas(atlas: TerritoryAtlas) -> TerritoryAtlas:
    masks = {
        tid: BinaryMask(atlas.shape, np.flip(m.values, axis=1))
        for tid, m in atlas.masks.items()
    }
    return TerritoryAtlas(level=atlas.level, shape=atlas.shape, masks=masks)


def _flip_slice(sl: LevelSlice) -> LevelSlice:
    return LevelSlice(
        image=Image(sl.image.shape, np.flip(sl.image.values, axis=1)),
        labels=LabelMap(sl.labels.shape, sl.labels.classes, np.flip(sl.labels.values, axis=1)),
        atlas=_flip_atlas(sl.atlas),
    )


def _jitter_slice(sl: LevelSlice, jitter: float) -> LevelSlice:
    return replace(sl, image=Image(sl.image.shape, sl.image.values + jitter))


def augment(case: PairedCase, flip: bool, jitter: float = 0.0) -> PairedCase:
    """Horizontal flip applied consistently to both levels' images, labels and
    atlases; a constant intensity offset applied to images only."""
    if not (np.isfinite(jitter) and abs(jitter) <= 0.05):
        raise ValidationError(f"jitter must satisfy |jitter| <= 0.05, got {jitter!r}")
    bg, sg = case.bg, case.sg
    if flip:
        bg, sg = _flip_slice(bg), _flip_slice(sg)
    if jitter != 0.0:
        bg, sg = _jitter_slice(bg, jitter), _jitter_slice(sg, jitter)
    return PairedCase(case.case_id, bg, sg, case.truth_involved)


def check_label_atlas_consistency(case: PairedCase) -> None:
    """Exhaustive per-case invariant check; raises ValidationError on failure."""
    for sl, level in ((case.bg, LEVEL_BG), (case.sg, LEVEL_SG)):
        allowed = set(territory_ids_for_level(level))
        present = set(np.unique(sl.labels.values).tolist()) - {0}
        if not present <= allowed:
            raise ValidationError(f"{level} labels use classes {sorted(present - allowed)} outside the level")
        for tid in present:
            inside = sl.atlas.mask(tid).values.astype(bool)
            if not (sl.labels.values[~inside] != tid).all():
                raise ValidationError(f"{level} labels for territory {tid} escape its mask")
        if not present <= case.truth_involved:
            raise ValidationError("labeled territories missing from truth_involved")
