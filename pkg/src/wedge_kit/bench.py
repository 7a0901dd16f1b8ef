"""Wall-clock comparison of the injection paths.

Each path goes from raw feature rows to the injected rows:

* ``cosine_dense``    cosine affinity matrix, cross-covariance, SVD
* ``cosine_factored`` the same projection without forming the affinity
* ``knn``             k-nearest-neighbour affinity, cross-covariance, SVD
* ``adain``           per-channel moment matching
"""
from __future__ import annotations

import csv
import io
import time
from typing import Callable, Dict, List, Sequence

import numpy as np

from .affinity import AffinityConfig, cosine_affinity, knn_affinity
from .features import FlatFeatures
from .injection import (
    adain_transform,
    apply_projection,
    cosine_cross_covariance,
    procrustes_from_covariance,
    weighted_procrustes,
)

PATHS = ("cosine_dense", "cosine_factored", "knn", "adain")


def _paths(k: int) -> Dict[str, Callable[[FlatFeatures, FlatFeatures], np.ndarray]]:
    knn_cfg = AffinityConfig(mode="knn", k=k)
    cos_cfg = AffinityConfig(mode="cosine")

    def cosine_dense(s, w):
        return apply_projection(s, weighted_procrustes(s, w, cosine_affinity(s, w, cos_cfg))).rows

    def cosine_factored(s, w):
        return apply_projection(s, procrustes_from_covariance(cosine_cross_covariance(s.rows, w.rows))).rows

    def knn(s, w):
        return apply_projection(s, weighted_procrustes(s, w, knn_affinity(s, w, knn_cfg))).rows

    def adain(s, w):
        return adain_transform(s.rows, w.rows).apply(s.rows.astype(np.float64))

    return {"cosine_dense": cosine_dense, "cosine_factored": cosine_factored, "knn": knn, "adain": adain}


def run_bench(
    sizes: Sequence[int] = (256, 1024, 4096),
    channels: Sequence[int] = (16, 64),
    repetitions: int = 10,
    k: int = 5,
    seed: int = 0,
    paths: Sequence[str] = PATHS,
    clock: Callable[[], float] = time.perf_counter,
) -> List[Dict]:
    """Time every path on random features with ``N_s = N_w = n``.

    Returns one row per (path, n, C) with the median and the quartiles of
    ``repetitions`` timed calls, after one untimed warm-up call.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    table = _paths(k)
    rows = []
    for n in sizes:
        for c in channels:
            src = FlatFeatures(rng.standard_normal((n, c)).astype(np.float32))
            web = FlatFeatures(rng.standard_normal((n, c)).astype(np.float32))
            for name in paths:
                fn = table[name]
                fn(src, web)
                times = []
                for _ in range(repetitions):
                    t0 = clock()
                    fn(src, web)
                    times.append(clock() - t0)
                q1, med, q3 = np.percentile(times, [25, 50, 75])
                rows.append({"path": name, "n": n, "channels": c, "reps": repetitions,
                             "median_s": float(med), "q1_s": float(q1), "q3_s": float(q3)})
    return rows


def bench_csv(rows: Sequence[Dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "n", "channels", "reps", "median_s", "q1_s", "q3_s"])
    for r in rows:
        w.writerow([r["path"], r["n"], r["channels"], r["reps"], f"{r['median_s']:.6g}", f"{r['q1_s']:.6g}", f"{r['q3_s']:.6g}"])
    return buf.getvalue()


def continuous_not_slower(rows: Sequence[Dict], min_n: int = 2048, path: str = "cosine_dense") -> bool:
    """True if ``path``'s median is <= the k-NN median for every size >= ``min_n``."""
    med = {(r["path"], r["n"], r["channels"]): r["median_s"] for r in rows}
    pairs = [(key, med[("knn",) + key[1:]]) for key in med if key[0] == path and key[1] >= min_n]
    if not pairs:
        raise ValueError(f"no benchmark rows with n >= {min_n}")
    return all(med[key] <= knn for key, knn in pairs)
