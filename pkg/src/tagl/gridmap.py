"""Grid-valued core types: images, probability maps, logit/probability stacks,
label maps and binary masks on a fixed H x W pixel grid.

All grids are row-major with (row, column) indexing, row 0 at the top.
Values are stored as float64 (real grids) or small integers (labels/masks);
instances are immutable after construction and safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_SUM_ATOL = 1e-6


class ValidationError(ValueError):
    """Raised when an input violates a documented type or range invariant."""


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int

    def __post_init__(self):
        if not (isinstance(self.height, (int, np.integer)) and self.height >= 1):
            raise ValidationError(f"height must be a positive integer, got {self.height!r}")
        if not (isinstance(self.width, (int, np.integer)) and self.width >= 1):
            raise ValidationError(f"width must be a positive integer, got {self.width!r}")

    @property
    def npixels(self) -> int:
        return int(self.height) * int(self.width)

    def as_tuple(self) -> tuple[int, int]:
        return (int(self.height), int(self.width))


def _freeze(a: np.ndarray) -> np.ndarray:
    # copy so the caller's array is never locked or aliased
    a = np.array(a, copy=True, order="C")
    a.flags.writeable = False
    return a


def _check_2d(values: np.ndarray, shape: GridShape, what: str) -> None:
    if values.shape != shape.as_tuple():
        raise ValidationError(
            f"{what}: values have shape {values.shape}, expected {shape.as_tuple()}"
        )


@dataclass(frozen=True)
class Image:
    """Scalar intensity grid; every value must be finite."""

    shape: GridShape
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _check_2d(v, self.shape, "Image")
        if not np.isfinite(v).all():
            raise ValidationError("Image: values must be finite")
        object.__setattr__(self, "values", _freeze(v))

    @classmethod
    def from_array(cls, values) -> "Image":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"Image: expected a 2-D array, got ndim={v.ndim}")
        return cls(GridShape(*v.shape), v)


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel probability grid; values in [0, 1]."""

    shape: GridShape
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _check_2d(v, self.shape, "ProbMap")
        if not np.isfinite(v).all():
            raise ValidationError("ProbMap: values must be finite")
        if (v < 0.0).any() or (v > 1.0).any():
            raise ValidationError("ProbMap: values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(v))

    @classmethod
    def from_array(cls, values) -> "ProbMap":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"ProbMap: expected a 2-D array, got ndim={v.ndim}")
        return cls(GridShape(*v.shape), v)


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel 0/1 indicator grid, stored as uint8."""

    shape: GridShape
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        _check_2d(v, self.shape, "BinaryMask")
        if not np.isin(v, (0, 1)).all():
            raise ValidationError("BinaryMask: values must be exactly 0 or 1")
        object.__setattr__(self, "values", _freeze(v.astype(np.uint8)))

    @classmethod
    def from_array(cls, values) -> "BinaryMask":
        v = np.asarray(values)
        if v.ndim != 2:
            raise ValidationError(f"BinaryMask: expected a 2-D array, got ndim={v.ndim}")
        return cls(GridShape(*v.shape), v)

    @property
    def count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices in {0, ..., classes-1}."""

    shape: GridShape
    classes: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (isinstance(self.classes, (int, np.integer)) and self.classes >= 1):
            raise ValidationError(f"LabelMap: classes must be a positive integer, got {self.classes!r}")
        v = np.asarray(self.values)
        _check_2d(v, self.shape, "LabelMap")
        if not np.issubdtype(v.dtype, np.integer):
            if not np.equal(np.mod(v, 1), 0).all():
                raise ValidationError("LabelMap: values must be integers")
        if (v < 0).any() or (v >= self.classes).any():
            raise ValidationError(f"LabelMap: values must lie in {{0..{self.classes - 1}}}")
        object.__setattr__(self, "values", _freeze(v.astype(np.int64)))

    @classmethod
    def from_array(cls, values, classes: int) -> "LabelMap":
        v = np.asarray(values)
        if v.ndim != 2:
            raise ValidationError(f"LabelMap: expected a 2-D array, got ndim={v.ndim}")
        return cls(GridShape(*v.shape), int(classes), v)


def _check_stack(values: np.ndarray, shape: GridShape, classes: int, what: str) -> None:
    if not (isinstance(classes, (int, np.integer)) and classes >= 1):
        raise ValidationError(f"{what}: classes must be a positive integer, got {classes!r}")
    expected = (int(classes),) + shape.as_tuple()
    if values.shape != expected:
        raise ValidationError(f"{what}: values have shape {values.shape}, expected {expected}")


@dataclass(frozen=True)
class LogitStack:
    """Per-(class, pixel) unnormalized scores; finite everywhere."""

    shape: GridShape
    classes: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _check_stack(v, self.shape, self.classes, "LogitStack")
        if not np.isfinite(v).all():
            raise ValidationError("LogitStack: values must be finite")
        object.__setattr__(self, "values", _freeze(v))

    @classmethod
    def from_array(cls, values) -> "LogitStack":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 3:
            raise ValidationError(f"LogitStack: expected a (C, H, W) array, got ndim={v.ndim}")
        return cls(GridShape(v.shape[1], v.shape[2]), int(v.shape[0]), v)


@dataclass(frozen=True)
class ProbStack:
    """Per-(class, pixel) probabilities; each pixel's class vector sums to 1."""

    shape: GridShape
    classes: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _check_stack(v, self.shape, self.classes, "ProbStack")
        if not np.isfinite(v).all():
            raise ValidationError("ProbStack: values must be finite")
        if (v < 0.0).any() or (v > 1.0).any():
            raise ValidationError("ProbStack: values must lie in [0, 1]")
        sums = v.sum(axis=0)
        if np.abs(sums - 1.0).max() > PROB_SUM_ATOL:
            raise ValidationError(
                f"ProbStack: per-pixel sums deviate from 1 by up to {np.abs(sums - 1.0).max():.3e}"
            )
        object.__setattr__(self, "values", _freeze(v))

    @classmethod
    def from_array(cls, values) -> "ProbStack":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 3:
            raise ValidationError(f"ProbStack: expected a (C, H, W) array, got ndim={v.ndim}")
        return cls(GridShape(v.shape[1], v.shape[2]), int(v.shape[0]), v)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax over axis 0 of a (C, ...) array."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_pixelwise(logits: LogitStack) -> ProbStack:
    """Per-pixel softmax over the class axis, stabilized by max subtraction."""
    if not isinstance(logits, LogitStack):
        raise ValidationError("softmax_pixelwise expects a LogitStack")
    p = softmax_channels(logits.values)
    return ProbStack(logits.shape, logits.classes, p)


def argmax_labels(probs: ProbStack) -> LabelMap:
    """Per-pixel argmax over classes; ties break toward the lowest class index."""
    if not isinstance(probs, ProbStack):
        raise ValidationError("argmax_labels expects a ProbStack")
    # np.argmax returns the first (lowest) index on ties.
    idx = np.argmax(probs.values, axis=0)
    return LabelMap(probs.shape, probs.classes, idx)


def infarct_probability(probs: ProbStack, background_class: int = 0) -> ProbMap:
    """Scalar infarct probability per pixel, 1 - P(background)."""
    if not isinstance(probs, ProbStack):
        raise ValidationError("infarct_probability expects a ProbStack")
    if not (0 <= background_class < probs.classes):
        raise ValidationError(
            f"background_class {background_class} out of range for {probs.classes} classes"
        )
    p = 1.0 - probs.values[background_class]
    return ProbMap(probs.shape, np.clip(p, 0.0, 1.0))
