"""Dense tensor types shared by every stage of the pipeline.

Layout is row-major ``(row, col, channel)``. A feature is a row vector of
length ``C``; linear maps act on features from the right (``F @ M.T``).
Storage is float32, reductions accumulate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE = 255
SIMPLEX_TOL = 1e-6


class ShapeError(ValueError):
    """Raised when array dimensions do not conform."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    if not arr.flags.writeable and arr.flags.c_contiguous:
        return arr
    arr = np.array(arr, order="C", copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-pixel feature vectors of one image at one network layer."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"FeatureMap needs a non-empty (H, W, C) array, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("FeatureMap values must be finite")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class FlatFeatures:
    """``N x C`` matrix whose rows are per-pixel features."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or min(rows.shape) < 1:
            raise ShapeError(f"FlatFeatures needs a non-empty (N, C) array, got {rows.shape}")
        if not np.isfinite(rows).all():
            raise ValueError("FlatFeatures values must be finite")
        object.__setattr__(self, "rows", _frozen(rows))

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def channels(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-pixel class distributions, shape ``(H, W, num_classes)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"ProbabilityMap needs a non-empty (H, W, K) array, got {data.shape}")
        if not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = data.sum(axis=-1, dtype=np.float64)
        worst = np.abs(sums - 1.0).max()
        if worst > SIMPLEX_TOL:
            raise ValueError(f"pixel class vector sums deviate from 1 by {worst:.3g}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids with ``IGNORE`` marking unlabeled pixels."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        if not 1 <= self.num_classes < IGNORE:
            raise ValueError(f"num_classes must be in [1, {IGNORE}), got {self.num_classes}")
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ShapeError(f"LabelMap needs a non-empty (H, W) array, got {data.shape}")
        if data.dtype != np.uint8:
            if data.min() < 0 or data.max() > IGNORE:
                raise ValueError("label ids must fit in uint8")
            data = data.astype(np.uint8)
        bad = (data != IGNORE) & (data >= self.num_classes)
        if bad.any():
            raise ValueError(f"label id {int(data[bad][0])} >= num_classes={self.num_classes}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.data != IGNORE


def flatten(fmap: FeatureMap) -> FlatFeatures:
    """Row ``i * W + j`` of the result is pixel ``(i, j)``."""
    return FlatFeatures(fmap.data.reshape(-1, fmap.channels))


def unflatten(flat: FlatFeatures, height: int, width: int) -> FeatureMap:
    if flat.count != height * width:
        raise ShapeError(f"cannot reshape {flat.count} rows into {height}x{width}")
    return FeatureMap(flat.rows.reshape(height, width, flat.channels))
