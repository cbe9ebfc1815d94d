"""ASPECTS territory model and score computation.

Ten territories over two axial levels: C, L, IC, I, M1-M3 at the basal
ganglia (BG) level and M4-M6 at the supraganglionic (SG) level. Label maps
use class index = territory id, with 0 reserved for background (11 classes).

A territory counts as involved when its aggregate infarct evidence exceeds
theta; the score is 10 minus the number of involved territories. Two
aggregation rules are provided: the mean infarct probability over the
territory mask (default) and the fraction of mask pixels above 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .gridmap import BinaryMask, GridShape, ProbMap, ValidationError

LEVEL_BG = "BG"
LEVEL_SG = "SG"
NUM_TERRITORIES = 10
NUM_CLASSES = 11  # background + ten territories

INVOLVEMENT_RULES = ("mean-prob", "pixel-fraction")
PIXEL_FRACTION_PROB_CUTOFF = 0.5


@dataclass(frozen=True)
class Territory:
    id: int
    name: str
    level: str


TERRITORIES: tuple[Territory, ...] = (
    Territory(1, "C", LEVEL_BG),
    Territory(2, "L", LEVEL_BG),
    Territory(3, "IC", LEVEL_BG),
    Territory(4, "I", LEVEL_BG),
    Territory(5, "M1", LEVEL_BG),
    Territory(6, "M2", LEVEL_BG),
    Territory(7, "M3", LEVEL_BG),
    Territory(8, "M4", LEVEL_SG),
    Territory(9, "M5", LEVEL_SG),
    Territory(10, "M6", LEVEL_SG),
)

TERRITORY_BY_ID: Mapping[int, Territory] = MappingProxyType({t.id: t for t in TERRITORIES})
BG_TERRITORY_IDS: tuple[int, ...] = tuple(t.id for t in TERRITORIES if t.level == LEVEL_BG)
SG_TERRITORY_IDS: tuple[int, ...] = tuple(t.id for t in TERRITORIES if t.level == LEVEL_SG)


def territory_ids_for_level(level: str) -> tuple[int, ...]:
    if level == LEVEL_BG:
        return BG_TERRITORY_IDS
    if level == LEVEL_SG:
        return SG_TERRITORY_IDS
    raise ValidationError(f"unknown level {level!r}, expected {LEVEL_BG!r} or {LEVEL_SG!r}")


@dataclass(frozen=True)
class TerritoryAtlas:
    """Disjoint binary masks for the territories of one level."""

    level: str
    shape: GridShape
    masks: Mapping[int, BinaryMask] = field(repr=False)

    def __post_init__(self):
        expected = territory_ids_for_level(self.level)
        if tuple(sorted(self.masks)) != tuple(sorted(expected)):
            raise ValidationError(
                f"{self.level} atlas must hold masks for territories {sorted(expected)}, "
                f"got {sorted(self.masks)}"
            )
        total = np.zeros(self.shape.as_tuple(), dtype=np.int64)
        for tid in expected:
            m = self.masks[tid]
            if m.shape != self.shape:
                raise ValidationError(f"atlas mask {tid} shape mismatch")
            total += m.values
        if (total > 1).any():
            raise ValidationError(f"{self.level} atlas masks overlap")
        object.__setattr__(self, "masks", MappingProxyType(dict(self.masks)))

    def mask(self, territory_id: int) -> BinaryMask:
        return self.masks[territory_id]

    def territory_ids(self) -> tuple[int, ...]:
        return territory_ids_for_level(self.level)


@dataclass(frozen=True)
class AspectsResult:
    involved: frozenset[int]
    per_territory_fraction: Mapping[int, float]
    score: int

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "involved": sorted(self.involved),
            "involved_names": [TERRITORY_BY_ID[i].name for i in sorted(self.involved)],
            "per_territory_fraction": {
                TERRITORY_BY_ID[i].name: self.per_territory_fraction[i]
                for i in sorted(self.per_territory_fraction)
            },
        }


def _aggregate(prob: np.ndarray, mask: np.ndarray, rule: str) -> float:
    inside = prob[mask.astype(bool)]
    if rule == "mean-prob":
        return float(inside.mean())
    return float((inside > PIXEL_FRACTION_PROB_CUTOFF).mean())


def territory_involvement(
    prob_infarct: ProbMap,
    atlas: TerritoryAtlas,
    theta: float = 0.5,
    rule: str = "mean-prob",
) -> dict[int, tuple[float, bool]]:
    """Per-territory (fraction, involved) for one level.

    fraction aggregates the infarct probability over the territory mask per
    the chosen rule; involved iff fraction > theta (strict).
    """
    if not isinstance(prob_infarct, ProbMap):
        raise ValidationError("territory_involvement expects a ProbMap")
    if prob_infarct.shape != atlas.shape:
        raise ValidationError("territory_involvement: probability/atlas shape mismatch")
    if not (np.isfinite(theta) and 0.0 < theta < 1.0):
        raise ValidationError(f"theta must lie in (0, 1), got {theta!r}")
    if rule not in INVOLVEMENT_RULES:
        raise ValidationError(f"unknown rule {rule!r}, expected one of {INVOLVEMENT_RULES}")
    out: dict[int, tuple[float, bool]] = {}
    for tid in atlas.territory_ids():
        mask = atlas.mask(tid)
        if mask.count == 0:
            raise ValidationError(f"territory {TERRITORY_BY_ID[tid].name} has an empty mask")
        frac = _aggregate(prob_infarct.values, mask.values, rule)
        out[tid] = (frac, frac > theta)
    return out


def aspects_score(
    bg: tuple[ProbMap, TerritoryAtlas],
    sg: tuple[ProbMap, TerritoryAtlas],
    theta: float = 0.5,
    rule: str = "mean-prob",
) -> AspectsResult:
    """Union of involvement across both levels; score = 10 - |involved|."""
    bg_prob, bg_atlas = bg
    sg_prob, sg_atlas = sg
    if bg_atlas.level != LEVEL_BG:
        raise ValidationError(f"first atlas must be level {LEVEL_BG}, got {bg_atlas.level}")
    if sg_atlas.level != LEVEL_SG:
        raise ValidationError(f"second atlas must be level {LEVEL_SG}, got {sg_atlas.level}")
    fractions: dict[int, float] = {}
    involved: set[int] = set()
    for prob, atlas in ((bg_prob, bg_atlas), (sg_prob, sg_atlas)):
        for tid, (frac, inv) in territory_involvement(prob, atlas, theta, rule).items():
            fractions[tid] = frac
            if inv:
                involved.add(tid)
    return AspectsResult(
        involved=frozenset(involved),
        per_territory_fraction=MappingProxyType(fractions),
        score=NUM_TERRITORIES - len(involved),
    )
