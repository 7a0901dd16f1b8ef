"""Source-to-web affinity matrices.

Two flavours: the continuous cosine cross-correlation between every source
and every web feature, and a discrete k-nearest-neighbour variant in which
each source feature keeps only its ``k`` most similar web features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .features import FlatFeatures, ShapeError


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class AffinityConfig:
    mode: str = "cosine"
    k: int = 1
    epsilon: float = 1e-8
    subsample_stride: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("cosine", "knn"):
            raise ConfigError(f"unknown affinity mode {self.mode!r}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.mode == "knn" and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.subsample_stride is not None and self.subsample_stride < 1:
            raise ConfigError("subsample_stride must be a positive integer")


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    """Dense ``N_s x N_w`` weights; ``total_weight`` is the sum of all entries."""

    data: np.ndarray
    mode: str = "cosine"

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.data.sum(dtype=np.float64))

    def scaled(self, factor: float) -> "AffinityMatrix":
        return AffinityMatrix(self.data * factor, self.mode)


def _web_rows(web: FlatFeatures, cfg: AffinityConfig) -> np.ndarray:
    rows = web.rows
    if cfg.subsample_stride:
        rows = rows[:: cfg.subsample_stride]
    return rows


def _unit_rows(rows: np.ndarray, eps: float) -> np.ndarray:
    rows = rows.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    return rows / np.maximum(norms, eps)[:, None]


def cosine_matrix(src: np.ndarray, web: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Raw cosine similarities in float64. Zero-norm rows give zero similarity."""
    if src.shape[1] != web.shape[1]:
        raise ShapeError(f"channel mismatch: {src.shape[1]} vs {web.shape[1]}")
    sim = _unit_rows(src, eps) @ _unit_rows(web, eps).T
    # rounding can push |cos| a hair past 1
    np.clip(sim, -1.0, 1.0, out=sim)
    return sim


def cosine_affinity(src: FlatFeatures, web: FlatFeatures, cfg: AffinityConfig = AffinityConfig()) -> AffinityMatrix:
    """Continuous affinity: entry ``(i, j)`` is the cosine of source row i and web row j.

    Negative cosines are kept. Norms are floored at ``cfg.epsilon``.
    """
    return AffinityMatrix(cosine_matrix(src.rows, _web_rows(web, cfg), cfg.epsilon), "cosine")


def top_k_mask(sim: np.ndarray, k: int) -> np.ndarray:
    """0/1 matrix selecting the ``k`` largest entries per row, ties to the lowest column."""
    n_rows, n_cols = sim.shape
    if not 1 <= k <= n_cols:
        raise ConfigError(f"k={k} must be in [1, {n_cols}]")
    if k == n_cols:
        return np.ones_like(sim)
    kth = -np.partition(-sim, k - 1, axis=1)[:, k - 1 : k]
    above = sim > kth
    need = k - above.sum(axis=1, keepdims=True)
    at = sim == kth
    # among entries equal to the k-th value keep the first `need` by column index
    take = at & (np.cumsum(at, axis=1) <= need)
    return (above | take).astype(sim.dtype)


def knn_affinity(src: FlatFeatures, web: FlatFeatures, cfg: AffinityConfig) -> AffinityMatrix:
    """Discrete affinity: weight 1 on each source row's ``cfg.k`` nearest web rows by cosine."""
    web_rows = _web_rows(web, cfg)
    if cfg.k > web_rows.shape[0]:
        raise ConfigError(f"k={cfg.k} exceeds the {web_rows.shape[0]} available web features")
    sim = cosine_matrix(src.rows, web_rows, cfg.epsilon)
    return AffinityMatrix(top_k_mask(sim, cfg.k), "knn")


def build_affinity(src: FlatFeatures, web: FlatFeatures, cfg: AffinityConfig) -> AffinityMatrix:
    if cfg.mode == "knn":
        return knn_affinity(src, web, cfg)
    return cosine_affinity(src, web, cfg)


def subsampled_count(n_web: int, stride: Optional[int]) -> int:
    return math.ceil(n_web / stride) if stride else n_web
