"""End-to-end experiments: data generation, the two-stage run, sweeps, evaluation.

Output layout of a run directory::

    seed_<s>/source_only.ckpt  stage1_SI.ckpt  stage2_PL.ckpt
    seed_<s>/loss_<stage>.csv
    seed_<s>/pseudo_labels/<web image>.png   pseudo_labels.csv
    seed_<s>/scores.csv        per-domain mIoU of every checkpoint
    seed_<s>/iou_<stage>_<domain>.csv
    seed_<s>/provenance.json   which files stage 2 was trained from
    report.csv                 domains x {Src. only, SI, PL}, mean over seeds
    run_meta.json              wall-clock timestamps (the only non-deterministic file)
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .affinity import ConfigError
from .config import ExperimentConfig, parse_points
from .data import (
    DEFAULT_CLASS_NAMES,
    TARGET_SHIFTS,
    ManifestError,
    ManifestRecord,
    apply_shift,
    fetch_corpus,
    generate_scene,
    load_labels,
    load_manifest,
    sample_web_shift,
    save_image,
    save_labels,
    write_manifest,
)
from .features import IGNORE, LabelMap
from .injection import InjectionConfig
from .metrics import ConfusionMatrix, accumulate, iou_table_csv, miou, pseudo_label_quality
from .model import (
    LabeledSet,
    ToySegmenter,
    UnlabeledSet,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .pseudo_label import threshold_labels

log = logging.getLogger(__name__)

STAGE_COLUMNS = (("source_only", "Src. only"), ("stage1_SI", "SI"), ("stage2_PL", "PL"))


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def generate_data(cfg: ExperimentConfig, out_dir) -> Path:
    """Render the source, web and target splits as PNGs plus ``manifest.jsonl``.

    Web label maps are written for pseudo-label quality reports only; the
    training code never reads them.
    """
    out = Path(out_dir)
    d = cfg.data
    spec = cfg.scene_spec()
    records: List[ManifestRecord] = []

    def emit(split, domain, name, image, labels):
        folder = out / (split if domain is None else f"{split}_{domain}")
        folder.mkdir(parents=True, exist_ok=True)
        save_image(folder / f"{name}.png", image)
        save_labels(folder / f"{name}_label.png", labels)
        rel = folder.relative_to(out)
        records.append(ManifestRecord(split, path=f"{rel}/{name}.png", label=f"{rel}/{name}_label.png", domain=domain))

    base = d.seed * 1_000_000
    for i in range(d.num_source):
        emit("source", None, f"src_{i:05d}", *generate_scene(spec, base + i))

    web_rng = np.random.default_rng([d.seed, 1])
    for i in range(d.num_web):
        shift = sample_web_shift(web_rng)
        density = float(web_rng.uniform(d.web_density_min, d.web_density_max))
        distractors = int(web_rng.integers(0, d.web_max_distractors + 1))
        image, labels = generate_scene(dataclasses.replace(spec, density=density), base + 200_000 + i, distractors)
        emit("web", None, f"web_{i:05d}", apply_shift(image, shift, seed=base + 200_000 + i), labels)

    for k, name in enumerate(d.target_domains):
        offset = base + 400_000 + 10_000 * k
        for i in range(d.num_target):
            image, labels = generate_scene(spec, offset + i)
            emit("target", name, f"{name}_{i:05d}", apply_shift(image, TARGET_SHIFTS[name], seed=offset + i), labels)

    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.jsonl", records)
    (out / "classes.txt").write_text("".join(n + "\n" for n in d.class_names), encoding="utf-8")
    return out / "manifest.jsonl"


@dataclass(frozen=True)
class Dataset:
    class_names: Tuple[str, ...]
    source: LabeledSet
    web: UnlabeledSet
    web_names: Tuple[str, ...]
    web_truth: Optional[np.ndarray]  # evaluation only
    targets: Dict[str, LabeledSet]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def load_dataset(data_dir) -> Dataset:
    """Load a generated (or hand-assembled) data directory through its manifest."""
    root = Path(data_dir)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.is_file():
        raise ConfigError(f"no manifest at {manifest_path}; run 'wedge-kit gen-data --out {root}' first")
    manifest = load_manifest(manifest_path)
    names_path = root / "classes.txt"
    class_names = tuple(names_path.read_text(encoding="utf-8").split()) if names_path.is_file() else DEFAULT_CLASS_NAMES
    if len(class_names) < 2:
        raise ConfigError(f"{names_path}: the class catalog needs at least two names, one per line")
    corpus = fetch_corpus(manifest)
    for rec, err in corpus.failures:
        log.warning("skipping %s: %s", rec.key, err)
    by_split: Dict[Tuple[str, Optional[str]], list] = {}
    for rec, image in corpus.items:
        by_split.setdefault((rec.split, rec.domain if rec.split == "target" else None), []).append((rec, image))

    def labels_for(rec):
        if rec.label is None:
            return None
        return load_labels(manifest.root / rec.label)

    def labeled(items, what):
        lbs = [labels_for(r) for r, _ in items]
        if any(lb is None for lb in lbs):
            raise ManifestError(f"{manifest_path}: every {what} record needs a 'label' field")
        return LabeledSet(np.stack([im for _, im in items]), np.stack(lbs))

    src_items = by_split.get(("source", None), [])
    web_items = by_split.get(("web", None), [])
    if not src_items:
        raise PipelineError(f"{manifest_path}: no readable source images")
    if not web_items:
        raise PipelineError(f"{manifest_path}: no readable web images")
    targets = {
        dom: labeled(items, f"target/{dom}")
        for (split, dom), items in sorted(by_split.items(), key=lambda kv: str(kv[0]))
        if split == "target"
    }
    if not targets:
        raise PipelineError(f"{manifest_path}: no target domains")
    web_lbs = [labels_for(r) for r, _ in web_items]
    return Dataset(
        class_names=class_names,
        source=labeled(src_items, "source"),
        web=UnlabeledSet(np.stack([im for _, im in web_items])),
        web_names=tuple(Path(r.key).stem for r, _ in web_items),
        web_truth=None if any(lb is None for lb in web_lbs) else np.stack(web_lbs),
        targets=targets,
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: ToySegmenter, data: LabeledSet, num_classes: int):
    """``(per-class IoU, mIoU)`` of ``model`` on a labeled set."""
    pred = predict(model, data.images).argmax(axis=-1)
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(pred, data.labels):
        cm = accumulate(cm, p, g)
    return miou(cm)


def evaluate_domains(model: ToySegmenter, ds: Dataset) -> Dict[str, Tuple[np.ndarray, float]]:
    return {dom: evaluate(model, data, ds.num_classes) for dom, data in ds.targets.items()}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _csv_text(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def pretty_table(csv_text: str) -> str:
    """Align a CSV table into space-padded columns for terminal output."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows if i < len(r)) for i in range(max(map(len, rows)))]
    lines = ["  ".join(cell.rjust(w) if k else cell.ljust(w) for k, (cell, w) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _sha256_files(paths: Iterable[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# one two-stage run


@dataclass(frozen=True)
class Variant:
    """One point of an experiment: injection settings, tau and web subset."""

    name: str
    injection: InjectionConfig
    tau: float
    web_fraction: float = 1.0
    source_only: bool = True  # also train and score the baseline


def default_variant(cfg: ExperimentConfig) -> Variant:
    return Variant("default", cfg.injection_config(), cfg.pseudo_label.tau)


def web_subset(ds: Dataset, fraction: float, seed: int) -> np.ndarray:
    """Deterministic subset of web indices (sorted) of size ceil(fraction * N)."""
    n = len(ds.web)
    k = max(1, int(np.ceil(fraction * n - 1e-9)))
    return np.sort(np.random.default_rng([seed, 2]).permutation(n)[:k])


def make_pseudo_labels(model: ToySegmenter, web: UnlabeledSet, tau: float) -> np.ndarray:
    return threshold_labels(predict(model, web.images), tau)


def pseudo_label_report(labels: np.ndarray, truth: Optional[np.ndarray], num_classes: int) -> Tuple[Optional[float], float]:
    """Corpus-level ``(precision, coverage)``; precision is None without ground truth."""
    if truth is None:
        return None, float((labels != IGNORE).mean())
    flat = labels.reshape(-1, labels.shape[-1])
    return pseudo_label_quality(LabelMap(flat, num_classes), LabelMap(truth.reshape(flat.shape), num_classes))


def run_variant(cfg: ExperimentConfig, ds: Dataset, variant: Variant, seed: int, out_dir) -> Dict:
    """Source-only baseline, stage 1, pseudo labels, stage 2 for one seed.

    Every checkpoint is scored on every target domain. Returns a dict with
    ``scores[stage][domain]`` (mIoU in percent) and pseudo-label quality.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    init = ToySegmenter.init(in_channels=3, feat_channels=cfg.model.feat_channels, num_classes=ds.num_classes, seed=seed)
    idx = web_subset(ds, variant.web_fraction, seed)
    web = UnlabeledSet(ds.web.images[idx])
    names = [ds.web_names[i] for i in idx]
    truth = None if ds.web_truth is None else ds.web_truth[idx]

    scores: Dict[str, Dict[str, float]] = {}
    iou_files = {}

    def finish(stage, model, trace):
        save_checkpoint(model, out / f"{stage}.ckpt")
        trace.to_csv(out / f"loss_{stage}.csv")
        scores[stage] = {}
        for dom, (per_class, m) in evaluate_domains(model, ds).items():
            scores[stage][dom] = 100.0 * m
            iou_files[f"iou_{stage}_{dom}.csv"] = iou_table_csv(per_class, ds.class_names)

    if variant.source_only:
        finish("source_only", *train(init, ds.source, None, cfg.train_config("source_only", seed)))

    stage1, trace1 = train(init, ds.source, web, cfg.train_config("stage1_SI", seed, variant.injection))
    finish("stage1_SI", stage1, trace1)

    labels = make_pseudo_labels(stage1, web, variant.tau)
    pl_dir = out / "pseudo_labels"
    pl_dir.mkdir(exist_ok=True)
    for name, lb in zip(names, labels):
        save_labels(pl_dir / f"{name}.png", lb)
    precision, coverage = pseudo_label_report(labels, truth, ds.num_classes)
    rows = [["image", "labeled_fraction"]] + [[n, f"{(lb != IGNORE).mean():.6f}"] for n, lb in zip(names, labels)]
    (out / "pseudo_labels.csv").write_text(_csv_text(rows), encoding="utf-8")

    # stage 2 reads the pseudo labels back from disk so the files are the provenance
    pl_files = [pl_dir / f"{n}.png" for n in names]
    stored = np.stack([load_labels(p) for p in pl_files])
    stage2, trace2 = train(stage1, ds.source, LabeledSet(web.images, stored), cfg.train_config("stage2_PL", seed, variant.injection))
    finish("stage2_PL", stage2, trace2)

    provenance = {
        "stage2_PL": {
            "initialised_from": "stage1_SI.ckpt",
            "initial_checkpoint_sha256": hashlib.sha256((out / "stage1_SI.ckpt").read_bytes()).hexdigest(),
            "pseudo_labels": "pseudo_labels/",
            "pseudo_label_count": len(pl_files),
            "pseudo_labels_sha256": _sha256_files(pl_files),
            "tau": variant.tau,
        }
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for fname, text in iou_files.items():
        (out / fname).write_text(text, encoding="utf-8")

    domains = list(ds.targets)
    rows = [["stage"] + domains + ["mean"]]
    for stage, per in scores.items():
        vals = [per[d] for d in domains]
        rows.append([stage] + [_fmt(v) for v in vals] + [_fmt(float(np.mean(vals)))])
    (out / "scores.csv").write_text(_csv_text(rows), encoding="utf-8")
    return {"seed": seed, "variant": variant.name, "scores": scores, "precision": precision, "coverage": coverage}


def _run_task(args):
    cfg, ds, variant, seed, out_dir = args
    return run_variant(cfg, ds, variant, seed, out_dir)


def run_many(cfg: ExperimentConfig, ds: Dataset, tasks: Sequence[Tuple[Variant, int, Path]], jobs: int = 1) -> List[Dict]:
    """Run ``(variant, seed, out_dir)`` tasks, optionally in worker processes.

    Results come back in task order and do not depend on ``jobs``.
    """
    payload = [(cfg, ds, v, s, o) for v, s, o in tasks]
    if jobs <= 1 or len(payload) <= 1:
        return [_run_task(p) for p in payload]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, payload))


def mean_scores(results: Sequence[Dict], stage: str, domains: Sequence[str]) -> Dict[str, float]:
    out = {d: float(np.mean([r["scores"][stage][d] for r in results])) for d in domains}
    out["mean"] = float(np.mean([out[d] for d in domains]))
    return out


def table_report(results: Sequence[Dict], domains: Sequence[str]) -> str:
    """Rows = target domains plus their mean; columns = Src. only, SI, PL."""
    stages = [(s, label) for s, label in STAGE_COLUMNS if all(s in r["scores"] for r in results)]
    means = {s: mean_scores(results, s, domains) for s, _ in stages}
    rows = [["domain"] + [label for _, label in stages]]
    for d in list(domains) + ["mean"]:
        rows.append([d] + [_fmt(means[s][d]) for s, _ in stages])
    return _csv_text(rows)


def _write_meta(out: Path, started: float, extra: Dict) -> None:
    meta = {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "elapsed_seconds": round(time.time() - started, 3)}
    meta.update(extra)
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_pipeline(cfg: ExperimentConfig, data_dir, out_dir, seeds: Sequence[int], jobs: int = 1) -> Path:
    """The full experiment; returns the path of ``report.csv``."""
    started = time.time()
    ds = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variant = default_variant(cfg)
    results = run_many(cfg, ds, [(variant, s, out / f"seed_{s}") for s in seeds], jobs)
    report = out / "report.csv"
    report.write_text(table_report(results, list(ds.targets)), encoding="utf-8")
    _write_meta(out, started, {"command": "run", "seeds": list(seeds)})
    return report


# ---------------------------------------------------------------------------
# sweeps


def _sweep(cfg, data_dir, out_dir, seeds, jobs, variants: Sequence[Variant], key: str, command: str) -> Path:
    if not variants:
        raise ConfigError(f"[sweep] the list for {command} is empty")
    started = time.time()
    ds = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(v, s, out / f"{key}_{v.name}" / f"seed_{s}") for v in variants for s in seeds]
    results = run_many(cfg, ds, tasks, jobs)
    domains = list(ds.targets)

    rows = [[key, "seed", "stage"] + domains + ["mean", "pl_precision", "pl_coverage"]]
    for r in results:
        for stage, _ in STAGE_COLUMNS:
            if stage not in r["scores"]:
                continue
            vals = [r["scores"][stage][d] for d in domains]
            prec = "" if r["precision"] is None else f"{r['precision']:.6f}"
            rows.append([r["variant"], r["seed"], stage] + [_fmt(v) for v in vals] + [_fmt(float(np.mean(vals))), prec, f"{r['coverage']:.6f}"])
    (out / f"sweep_{key}_runs.csv").write_text(_csv_text(rows), encoding="utf-8")

    summary = [[key] + [f"SI {d}" for d in domains] + ["SI mean"] + [f"PL {d}" for d in domains] + ["PL mean", "pl_precision", "pl_coverage"]]
    for v in variants:
        group = [r for r in results if r["variant"] == v.name]
        si = mean_scores(group, "stage1_SI", domains)
        pl = mean_scores(group, "stage2_PL", domains)
        precs = [r["precision"] for r in group if r["precision"] is not None]
        summary.append(
            [v.name]
            + [_fmt(si[d]) for d in domains] + [_fmt(si["mean"])]
            + [_fmt(pl[d]) for d in domains] + [_fmt(pl["mean"])]
            + [f"{np.mean(precs):.6f}" if precs else "", f"{np.mean([r['coverage'] for r in group]):.6f}"]
        )
    path = out / f"sweep_{key}.csv"
    path.write_text(_csv_text(summary), encoding="utf-8")
    _write_meta(out, started, {"command": command, "seeds": list(seeds)})
    return path


def sweep_tau(cfg, data_dir, out_dir, seeds, jobs=1) -> Path:
    base = default_variant(cfg)
    variants = [dataclasses.replace(base, name=f"{t:g}", tau=t, source_only=False) for t in cfg.sweep.tau]
    return _sweep(cfg, data_dir, out_dir, seeds, jobs, variants, "tau", "sweep-tau")


def sweep_method(cfg, data_dir, out_dir, seeds, jobs=1) -> Path:
    base = default_variant(cfg)
    variants = [dataclasses.replace(base, name=m, injection=cfg.injection_config(method=m), source_only=False) for m in cfg.sweep.methods]
    return _sweep(cfg, data_dir, out_dir, seeds, jobs, variants, "method", "sweep-method")


def sweep_points(cfg, data_dir, out_dir, seeds, jobs=1) -> Path:
    base = default_variant(cfg)
    variants = [
        dataclasses.replace(base, name="+".join(map(str, parse_points(p))), injection=cfg.injection_config(points=parse_points(p)), source_only=False)
        for p in cfg.sweep.points
    ]
    return _sweep(cfg, data_dir, out_dir, seeds, jobs, variants, "points", "sweep-points")


def sweep_corpus(cfg, data_dir, out_dir, seeds, jobs=1) -> Path:
    base = default_variant(cfg)
    variants = [dataclasses.replace(base, name=f"{f:g}", web_fraction=f, source_only=False) for f in cfg.sweep.corpus_fractions]
    return _sweep(cfg, data_dir, out_dir, seeds, jobs, variants, "corpus", "sweep-corpus")


def evaluate_checkpoint(checkpoint, data_dir, out_path=None) -> str:
    """Per-domain mIoU and per-class IoU of one checkpoint as CSV text."""
    path = Path(checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    ds = load_dataset(data_dir)
    if model.num_classes != ds.num_classes:
        raise PipelineError(f"{path} predicts {model.num_classes} classes but the data has {ds.num_classes}")
    rows = [["domain", "miou"] + list(ds.class_names)]
    means = []
    for dom, (per_class, m) in evaluate_domains(model, ds).items():
        means.append(100.0 * m)
        rows.append([dom, _fmt(100.0 * m)] + ["" if np.isnan(v) else _fmt(100.0 * v) for v in per_class])
    rows.append(["mean", _fmt(float(np.mean(means)))] + [""] * ds.num_classes)
    text = _csv_text(rows)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text, encoding="utf-8")
    return text
