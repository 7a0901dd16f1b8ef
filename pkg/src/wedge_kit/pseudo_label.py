"""Entropy-thresholded pseudo labels for unlabeled images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import IGNORE, SIMPLEX_TOL, LabelMap, ProbabilityMap


@dataclass(frozen=True)
class PseudoLabelConfig:
    tau: float = 5e-2  # nats

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class PseudoLabelStats:
    labeled_fraction: float
    per_class_counts: np.ndarray


def entropy(p) -> float:
    """Shannon entropy in nats, with ``0 * ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty probability vector")
    if (p < 0).any() or (p > 1).any() or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"not a probability vector: {p}")
    return float(pixel_entropy(p[None])[0])


def pixel_entropy(probs: np.ndarray) -> np.ndarray:
    """Entropy over the last axis; no simplex validation."""
    p = np.asarray(probs, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -np.einsum("...k,...k->...", p, logs)


def threshold_labels(probs: np.ndarray, tau: float) -> np.ndarray:
    """Argmax ids where entropy < tau, IGNORE elsewhere, for a raw ``(..., K)`` array."""
    keep = pixel_entropy(probs) < tau
    ids = np.argmax(probs, axis=-1)  # first maximum on ties
    return np.where(keep, ids, IGNORE).astype(np.uint8)


def generate_pseudo_labels(probs: ProbabilityMap, cfg: PseudoLabelConfig = PseudoLabelConfig()):
    labels = threshold_labels(probs.data, cfg.tau)
    valid = labels != IGNORE
    counts = np.bincount(labels[valid], minlength=probs.num_classes)
    stats = PseudoLabelStats(labeled_fraction=float(valid.mean()), per_class_counts=counts)
    return LabelMap(labels, probs.num_classes), stats
