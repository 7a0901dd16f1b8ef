"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The experiment criteria (6, 7, 8, 10) run the shipped default
configuration end to end in a temporary directory.
"""
import csv
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from oracles import grid_o2, j_sq_bruteforce, random_orthogonal
from test_model import gradient_instance

from wedge_kit import cli, pipeline
from wedge_kit.affinity import AffinityConfig, AffinityMatrix, cosine_affinity
from wedge_kit.config import ExperimentConfig
from wedge_kit.features import IGNORE, FeatureMap, FlatFeatures, ProbabilityMap
from wedge_kit.injection import InjectionConfig, adain_inject, inject, objective_sq, weighted_procrustes
from wedge_kit.model import load_checkpoint, predict
from wedge_kit.pseudo_label import PseudoLabelConfig, entropy, generate_pseudo_labels, threshold_labels


def ff(rows):
    return FlatFeatures(np.asarray(rows, dtype=np.float32))


# --------------------------------------------------------------------------- 1


def test_criterion_01_procrustes_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_orth, worst_gap, failures = 0.0, -np.inf, 0
    for _ in range(50):
        s, w = ff(rng.standard_normal((64, 8))), ff(rng.standard_normal((64, 8)))
        aff = cosine_affinity(s, w, AffinityConfig())
        m = weighted_procrustes(s, w, aff)
        worst_orth = max(worst_orth, float(np.linalg.norm(m.data @ m.data.T - np.eye(8))))
        j_m = objective_sq(s, w, aff, m)
        sig = aff.data.astype(np.float64)
        s64, w64 = s.rows.astype(np.float64), w.rows.astype(np.float64)
        for _ in range(100):
            q = random_orthogonal(8, rng)
            gap = j_m - j_sq_bruteforce(s64, w64, sig, q)
            worst_gap = max(worst_gap, gap)
            failures += gap > 1e-9

    # C = 2: the closed form is never worse than the finest grid point, and
    # lands on the same branch and angle as the grid minimiser
    grid_excess, angle_err, branch_ok = -np.inf, 0.0, True
    for _ in range(10):
        s, w = ff(rng.standard_normal((64, 2))), ff(rng.standard_normal((64, 2)))
        aff = cosine_affinity(s, w, AffinityConfig())
        sig = aff.data.astype(np.float64)
        m = weighted_procrustes(s, w, aff)
        j_grid, _, is_refl, theta = grid_o2(s.rows.astype(np.float64), w.rows.astype(np.float64), sig)
        j_m = j_sq_bruteforce(s.rows.astype(np.float64), w.rows.astype(np.float64), sig, m.data)
        grid_excess = max(grid_excess, j_m - j_grid)
        det = np.linalg.det(m.data)
        branch_ok &= (det < 0) == is_refl
        phi = np.arctan2(m.data[1, 0], m.data[0, 0]) % (2 * np.pi)
        d = abs(phi - theta)
        angle_err = max(angle_err, min(d, 2 * np.pi - d))
    elapsed = time.perf_counter() - t0

    ok = (
        worst_orth <= 1e-5 * 8
        and failures == 0
        and grid_excess <= 1e-9
        and branch_ok
        and angle_err <= 1e-4
        and elapsed < 30
    )
    record_criterion(
        1,
        "Procrustes optimality",
        ok,
        f"max|MM^T-I|_F={worst_orth:.2e}, max J(M)-J(Q)={worst_gap:.2e} over 5000 Q, "
        f"C=2 J(M)-J(grid)={grid_excess:.2e}, angle err={angle_err:.1e}, {elapsed:.1f}s",
    )
    assert ok


# --------------------------------------------------------------------------- 2


def test_criterion_02_rotation_recovery():
    t0 = time.perf_counter()
    src = ff([[1, 0], [0, 1], [1, 1]])
    web = ff([[0, 1], [-1, 0], [-1, 1]])
    m = weighted_procrustes(src, web, AffinityMatrix(np.eye(3)))
    err = float(np.abs(m.data - np.array([[0.0, -1.0], [1.0, 0.0]])).max())
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-5 and elapsed < 1.0
    record_criterion(2, "rotation recovery", ok, f"max elementwise error {err:.1e}, {elapsed * 1e3:.1f} ms")
    assert ok


# --------------------------------------------------------------------------- 3


def test_criterion_03_self_injection_identity():
    rng = np.random.default_rng(3)
    src = FeatureMap(rng.standard_normal((8, 9, 6)).astype(np.float32))
    assert np.linalg.matrix_rank(src.data.reshape(-1, 6)) == 6
    out = inject(src, src, InjectionConfig(method="procrustes"), rng)
    err_p = float(np.abs(out.data.astype(np.float64) - src.data).max())
    out_a = adain_inject(src, src, InjectionConfig(method="adain"))
    err_a = float(np.abs(out_a.data.astype(np.float64) - src.data).max())
    ok = err_p <= 1e-4 and err_a <= 1e-5
    record_criterion(3, "self-injection identity", ok, f"procrustes max-abs {err_p:.1e}, AdaIN max-abs {err_a:.1e}")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_04_gradient_correctness():
    t0 = time.perf_counter()
    methods = ("procrustes", "adain", "mast_knn")
    errors = {}
    for seed in range(20):
        errors[(seed, "none")] = gradient_instance(100 + seed, "none")
        method = methods[seed % 3]
        errors[(seed, method)] = gradient_instance(100 + seed, method)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 60
    record_criterion(4, "gradient correctness", ok, f"max relative error {worst:.2e} over {len(errors)} checks, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 5


def test_criterion_05_entropy_pseudo_label():
    h = entropy([0.99, 0.01])
    lab_a, _ = generate_pseudo_labels(ProbabilityMap(np.array([[[0.99, 0.01]]])), PseudoLabelConfig(0.05))
    lab_b, _ = generate_pseudo_labels(ProbabilityMap(np.array([[[0.995, 0.005]]])), PseudoLabelConfig(0.05))
    rng = np.random.default_rng(5)
    monotone = True
    for _ in range(100):
        logits = rng.normal(size=(6, 7, 4)) * rng.uniform(0.5, 8.0)
        e = np.exp(logits - logits.max(-1, keepdims=True))
        probs = ProbabilityMap(e / e.sum(-1, keepdims=True))
        lo, hi = np.sort(rng.uniform(1e-4, 1.4, 2))
        a, sa = generate_pseudo_labels(probs, PseudoLabelConfig(lo))
        b, sb = generate_pseudo_labels(probs, PseudoLabelConfig(hi))
        la, lb = a.data != IGNORE, b.data != IGNORE
        monotone &= not (la & ~lb).any() and sa.labeled_fraction <= sb.labeled_fraction
    ok = abs(h - 0.05600) <= 1e-5 and lab_a.data[0, 0] == IGNORE and lab_b.data[0, 0] == 0 and monotone
    record_criterion(
        5,
        "entropy and pseudo labels",
        ok,
        f"h(0.99,0.01)={h:.6f}, rejected={lab_a.data[0, 0] == IGNORE}, (0.995,0.005) accepted={lab_b.data[0, 0] == 0}, "
        f"tau-monotone on 100 maps={monotone}",
    )
    assert ok


# --------------------------------------------------------------------------- experiment


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = ExperimentConfig()
    pipeline.generate_data(cfg, root / "data")
    t0 = time.perf_counter()
    report = pipeline.run_pipeline(cfg, root / "data", root / "run", seeds=cfg.run.seeds)
    elapsed = time.perf_counter() - t0
    ds = pipeline.load_dataset(root / "data")
    domains = list(ds.targets)
    scores = {}
    for seed in cfg.run.seeds:
        rows = list(csv.reader((root / "run" / f"seed_{seed}" / "scores.csv").open()))
        scores[seed] = {r[0]: float(r[-1]) for r in rows[1:]}
    return {"cfg": cfg, "root": root, "report": report, "elapsed": elapsed, "ds": ds, "domains": domains, "scores": scores}


def test_criterion_06_stage_ordering(experiment):
    sc = experiment["scores"]
    seeds = sorted(sc)
    so = np.mean([sc[s]["source_only"] for s in seeds])
    si = np.mean([sc[s]["stage1_SI"] for s in seeds])
    pl = np.mean([sc[s]["stage2_PL"] for s in seeds])
    per_seed = [sc[s]["stage2_PL"] - sc[s]["stage1_SI"] for s in seeds]
    ok = si >= so + 3.0 and min(per_seed) >= -0.5 and pl - si >= 0.0 and experiment["elapsed"] < 600
    record_criterion(
        6,
        "stage ordering (Src. only < SI <= PL)",
        ok,
        f"mean mIoU Src.only={so:.2f} SI={si:.2f} PL={pl:.2f}; SI-Src.only={si - so:+.2f}; "
        f"PL-SI per seed={['%+.2f' % d for d in per_seed]}, mean {pl - si:+.2f}; pipeline {experiment['elapsed']:.0f}s",
    )
    assert ok


def test_criterion_07_method_comparison(experiment):
    cfg, ds, root = experiment["cfg"], experiment["ds"], experiment["root"]
    base = pipeline.default_variant(cfg)
    adain = pipeline.Variant("adain", cfg.injection_config(method="adain"), base.tau, source_only=False)
    results = pipeline.run_many(cfg, ds, [(adain, s, root / "adain" / f"seed_{s}") for s in cfg.run.seeds])
    sc = experiment["scores"]
    proc_si = np.mean([sc[s]["stage1_SI"] for s in cfg.run.seeds])
    proc_pl = np.mean([sc[s]["stage2_PL"] for s in cfg.run.seeds])
    ad_si = pipeline.mean_scores(results, "stage1_SI", experiment["domains"])["mean"]
    ad_pl = pipeline.mean_scores(results, "stage2_PL", experiment["domains"])["mean"]
    # non-inferiority within 0.5 mIoU points, judged after each stage
    ok = proc_si >= ad_si - 0.5 and proc_pl >= ad_pl - 0.5
    record_criterion(
        7,
        "procrustes vs AdaIN injection",
        ok,
        f"SI mean mIoU procrustes={proc_si:.2f} AdaIN={ad_si:.2f} (diff {proc_si - ad_si:+.2f}); "
        f"PL procrustes={proc_pl:.2f} AdaIN={ad_pl:.2f} (diff {proc_pl - ad_pl:+.2f})",
    )
    assert ok


def test_criterion_08_tau_sweep(experiment):
    cfg, ds, root = experiment["cfg"], experiment["ds"], experiment["root"]
    taus = sorted(cfg.sweep.tau)
    assert taus == [0.005, 0.01, 0.05, 0.1]
    coverage = {t: [] for t in taus}
    accepted = {t: 0 for t in taus}
    correct = {t: 0 for t in taus}
    for seed in cfg.run.seeds:
        model = load_checkpoint(root / "run" / f"seed_{seed}" / "stage1_SI.ckpt")
        probs = predict(model, ds.web.images)
        for t in taus:
            labels = threshold_labels(probs, t)
            _, c = pipeline.pseudo_label_report(labels, ds.web_truth, ds.num_classes)
            coverage[t].append(c)
            # pooled over seeds: a seed that accepts nothing adds no evidence
            keep = labels != IGNORE
            accepted[t] += int(keep.sum())
            correct[t] += int((labels[keep] == ds.web_truth[keep]).sum())
    cov = [float(np.mean(coverage[t])) for t in taus]
    assert accepted[0.005] > 0, "no pixel accepted at tau=0.005 in any seed"
    prec = {t: correct[t] / accepted[t] for t in taus}
    per_seed_monotone = all(
        all(coverage[a][i] <= coverage[b][i] for a, b in zip(taus, taus[1:])) for i in range(len(cfg.run.seeds))
    )
    ok = per_seed_monotone and prec[0.005] >= prec[0.1]
    record_criterion(
        8,
        "tau sweep",
        ok,
        "coverage " + ", ".join(f"{t:g}:{c:.4f}" for t, c in zip(taus, cov))
        + "; pooled precision "
        + ", ".join(f"{t:g}:{prec[t]:.4f} ({accepted[t]} px)" for t in taus),
    )
    assert ok


def test_criterion_09_benchmark(tmp_path, capsys):
    code = cli.main(["bench", "--out", str(tmp_path)])
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    med = {(r["path"], int(r["n"]), int(r["channels"])): float(r["median_s"]) for r in rows}
    big = [(n, c) for (p, n, c) in med if p == "cosine_dense" and n >= 2048]
    ok = code == 0 and bool(big) and all(med[("cosine_dense", n, c)] <= med[("knn", n, c)] for n, c in big)
    detail = ", ".join(
        f"N={n} C={c}: cosine {med[('cosine_dense', n, c)] * 1e3:.1f} ms vs kNN {med[('knn', n, c)] * 1e3:.1f} ms" for n, c in sorted(big)
    )
    record_criterion(9, "benchmark (continuous <= kNN at N >= 2048)", ok, detail or "no rows with N >= 2048")
    assert ok


def _digests(folder: Path):
    return {
        p.relative_to(folder).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(folder.rglob("*"))
        if p.suffix in (".ckpt", ".csv")
    }


def test_criterion_10_determinism(experiment, tmp_path):
    data = str(experiment["root"] / "data")
    for name in ("a", "b"):
        assert cli.main(["run", "--data", data, "--out", str(tmp_path / name), "--seed", "0"]) == 0
    a, b = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    ckpts = [k for k in a if k.endswith(".ckpt")]
    ok = bool(ckpts) and a == b
    record_criterion(10, "determinism", ok, f"{len(a)} checkpoint/CSV files compared, {len(ckpts)} checkpoints, identical={a == b}")
    assert ok
