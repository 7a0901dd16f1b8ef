"""Feature-space style injection.

The content-aware method aligns source features to web features with the
orthogonal matrix ``M`` minimising the affinity-weighted squared distance

    J(M) = (1 / N_sigma) * sum_ij sigma_ij * ||s_i M^T - w_j||^2

whose closed form is ``M = U V^T`` from the SVD of the normalised
cross-covariance ``W^T Sigma^T S / N_sigma``. AdaIN (per-channel moment
matching) is provided as the global-statistics baseline.

Every injection is expressed as an affine map ``F -> F @ A + b`` on row
features so that training can hold it fixed within an iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Optional

import numpy as np

from .affinity import AffinityConfig, AffinityMatrix, ConfigError, build_affinity
from .features import FeatureMap, FlatFeatures, ShapeError, flatten, unflatten

METHODS = ("none", "adain", "mast_knn", "procrustes")


class DegenerateAffinityError(ValueError):
    """The affinity weights sum to zero, so the objective is undefined."""


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    data: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.data, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"projection must be square, got {m.shape}")
        err = np.linalg.norm(m @ m.T - np.eye(m.shape[0]))
        if err > 1e-5 * m.shape[0]:
            raise NumericError(f"projection is not orthogonal (|MM^T - I|_F = {err:.3g})")
        object.__setattr__(self, "data", m)

    @property
    def dim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class InjectionConfig:
    method: str = "procrustes"
    injection_points: FrozenSet[int] = field(default_factory=lambda: frozenset({1, 2}))
    probability: float = 1.0
    adain_epsilon: float = 1e-5
    knn_k: int = 5
    affinity_epsilon: float = 1e-8
    subsample_stride: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown injection method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "injection_points", frozenset(self.injection_points))
        if self.method != "none" and not self.injection_points:
            raise ConfigError("injection_points must be non-empty")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("probability must be in [0, 1]")
        if self.adain_epsilon <= 0:
            raise ConfigError("adain_epsilon must be positive")

    def affinity_config(self) -> AffinityConfig:
        mode = "knn" if self.method == "mast_knn" else "cosine"
        return AffinityConfig(mode=mode, k=self.knn_k, epsilon=self.affinity_epsilon)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Row-feature map ``F -> F @ matrix + shift``."""

    matrix: np.ndarray
    shift: np.ndarray

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return rows @ self.matrix + self.shift


def _check_pair(src: FlatFeatures, web: FlatFeatures, aff: AffinityMatrix) -> None:
    if src.channels != web.channels:
        raise ShapeError(f"channel mismatch: {src.channels} vs {web.channels}")
    if aff.data.shape != (src.count, web.count):
        raise ShapeError(f"affinity is {aff.data.shape}, expected {(src.count, web.count)}")


def _fixed_sign_svd(k: np.ndarray):
    try:
        u, s, vt = np.linalg.svd(k)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, s, vt * signs[:, None]


def cross_covariance(src: FlatFeatures, web: FlatFeatures, aff: AffinityMatrix) -> np.ndarray:
    """``W^T Sigma^T S / N_sigma`` in float64."""
    _check_pair(src, web, aff)
    total = aff.total_weight
    if not np.isfinite(total) or abs(total) < 1e-12:
        raise DegenerateAffinityError(f"affinity weights sum to {total}")
    s = src.rows.astype(np.float64)
    w = web.rows.astype(np.float64)
    return w.T @ (aff.data.T @ s) / total


def cosine_cross_covariance(src_rows: np.ndarray, web_rows: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """``W^T Sigma^T S / N_sigma`` for the cosine affinity without forming ``Sigma``.

    With unit rows ``S_hat``, ``W_hat`` the affinity is ``S_hat W_hat^T``, so the
    product factors into two ``C x C`` matrices and ``N_sigma`` into a dot
    product of column sums: O(N C^2) instead of O(N_s N_w C).
    """
    s = np.asarray(src_rows, dtype=np.float64)
    w = np.asarray(web_rows, dtype=np.float64)
    if s.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: {s.shape[1]} vs {w.shape[1]}")
    s_hat = s / np.maximum(np.linalg.norm(s, axis=1), eps)[:, None]
    w_hat = w / np.maximum(np.linalg.norm(w, axis=1), eps)[:, None]
    total = float(s_hat.sum(axis=0) @ w_hat.sum(axis=0))
    if not np.isfinite(total) or abs(total) < 1e-12:
        raise DegenerateAffinityError(f"affinity weights sum to {total}")
    return (w.T @ w_hat) @ (s_hat.T @ s) / total


def procrustes_from_covariance(k: np.ndarray) -> ProjectionMatrix:
    u, _, vt = _fixed_sign_svd(k)
    return ProjectionMatrix(u @ vt)


def weighted_procrustes(src: FlatFeatures, web: FlatFeatures, aff: AffinityMatrix) -> ProjectionMatrix:
    """Orthogonal ``M`` minimising the affinity-weighted squared objective.

    Dividing by ``N_sigma`` before the SVD keeps ``M`` the minimiser of the
    normalised objective even if the weights sum to a negative number.
    """
    return procrustes_from_covariance(cross_covariance(src, web, aff))


def _sq_distance_terms(src, web, aff, m):
    _check_pair(src, web, aff)
    if m.dim != src.channels:
        raise ShapeError(f"projection dim {m.dim} != feature channels {src.channels}")
    total = aff.total_weight
    if abs(total) < 1e-12:
        raise DegenerateAffinityError(f"affinity weights sum to {total}")
    a = src.rows.astype(np.float64) @ m.data.T
    w = web.rows.astype(np.float64)
    return a, w, total


def objective_sq(src: FlatFeatures, web: FlatFeatures, aff: AffinityMatrix, m: ProjectionMatrix) -> float:
    """Normalised weighted sum of squared distances (the problem the SVD solves)."""
    a, w, total = _sq_distance_terms(src, web, aff, m)
    sig = aff.data.astype(np.float64)
    acc = sig.sum(axis=1) @ np.einsum("ij,ij->i", a, a)
    acc += sig.sum(axis=0) @ np.einsum("ij,ij->i", w, w)
    acc -= 2.0 * np.einsum("ij,ij->", sig, a @ w.T)
    return float(acc / total)


def objective_l2(src: FlatFeatures, web: FlatFeatures, aff: AffinityMatrix, m: ProjectionMatrix) -> float:
    """Same weighting with unsquared Euclidean distances."""
    a, w, total = _sq_distance_terms(src, web, aff, m)
    d2 = np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", w, w)[None, :] - 2.0 * (a @ w.T)
    dist = np.sqrt(np.maximum(d2, 0.0))
    return float(np.einsum("ij,ij->", aff.data.astype(np.float64), dist) / total)


def apply_projection(src: FlatFeatures, m: ProjectionMatrix) -> FlatFeatures:
    if src.channels != m.dim:
        raise ShapeError(f"projection dim {m.dim} != feature channels {src.channels}")
    return FlatFeatures(src.rows.astype(np.float64) @ m.data.T)


def _moments(rows: np.ndarray):
    rows = rows.astype(np.float64)
    mean = rows.mean(axis=0)
    std = np.sqrt(np.mean((rows - mean) ** 2, axis=0))
    return mean, std


def adain_transform(src_rows: np.ndarray, style_rows: np.ndarray, eps: float = 1e-5) -> AffineTransform:
    mu_s, sd_s = _moments(src_rows)
    mu_t, sd_t = _moments(style_rows)
    scale = sd_t / np.maximum(sd_s, eps)
    return AffineTransform(np.diag(scale), mu_t - mu_s * scale)


def adain_inject(src: FeatureMap, style: FeatureMap, cfg: InjectionConfig = InjectionConfig(method="adain")) -> FeatureMap:
    """Match per-channel mean and population std of ``src`` to ``style``."""
    if src.channels != style.channels:
        raise ShapeError(f"channel mismatch: {src.channels} vs {style.channels}")
    s = src.data.reshape(-1, src.channels)
    t = adain_transform(s, style.data.reshape(-1, style.channels), cfg.adain_epsilon)
    return FeatureMap(t.apply(s.astype(np.float64)).reshape(src.data.shape))


def injection_transform(src_rows: np.ndarray, web_rows: np.ndarray, cfg: InjectionConfig) -> AffineTransform:
    """Build the affine map that injects ``web_rows``' style into ``src_rows``."""
    c = src_rows.shape[1]
    if cfg.method == "none":
        return AffineTransform(np.eye(c), np.zeros(c))
    if cfg.method == "adain":
        if web_rows.shape[1] != c:
            raise ShapeError(f"channel mismatch: {c} vs {web_rows.shape[1]}")
        return adain_transform(src_rows, web_rows, cfg.adain_epsilon)
    if cfg.subsample_stride:
        web_rows = web_rows[:: cfg.subsample_stride]
    if cfg.method == "procrustes":
        m = procrustes_from_covariance(cosine_cross_covariance(src_rows, web_rows, cfg.affinity_epsilon))
    else:
        src, web = FlatFeatures(src_rows), FlatFeatures(web_rows)
        m = weighted_procrustes(src, web, build_affinity(src, web, cfg.affinity_config()))
    return AffineTransform(m.data.T, np.zeros(c))


def inject(src: FeatureMap, web: FeatureMap, cfg: InjectionConfig, rng: np.random.Generator) -> FeatureMap:
    """Inject the style of ``web`` into ``src`` with probability ``cfg.probability``."""
    if cfg.method == "none":
        return src
    if rng.random() >= cfg.probability:
        return src
    if cfg.method == "adain":
        return adain_inject(src, web, cfg)
    flat = flatten(src)
    t = injection_transform(flat.rows, flatten(web).rows, cfg)
    return unflatten(FlatFeatures(t.apply(flat.rows.astype(np.float64))), src.height, src.width)
