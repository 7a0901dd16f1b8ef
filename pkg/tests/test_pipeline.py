import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from wedge_kit import cli, pipeline
from wedge_kit.affinity import ConfigError
from wedge_kit.config import parse_config
from wedge_kit.data import ManifestError, load_labels, load_manifest

TINY = """
[data]
num_source = 6
num_web = 5
num_target = 3
height = 16
width = 16
[model]
feat_channels = 4
[stage1]
iterations = 12
[stage2]
iterations = 12
[run]
seeds = 0, 1
[sweep]
tau = 0.1, 0.005
methods = none, adain
points = 1, 1+2
corpus_fractions = 0.4, 1.0
[bench]
sizes = 32
channels = 4
repetitions = 2
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    (root / "tiny.ini").write_text(TINY)
    cfg = parse_config(TINY)
    pipeline.generate_data(cfg, root / "data")
    return cfg, root


def _digest(folder: Path, pattern: str):
    return {p.relative_to(folder).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.glob(pattern))}


def test_generated_manifest_layout(tiny):
    cfg, root = tiny
    m = load_manifest(root / "data" / "manifest.jsonl")
    assert len(m.select("source")) == 6 and len(m.select("web")) == 5
    assert m.domains() == ["dusk", "fog", "tint"]
    assert all(r.label is not None for r in m.records)


def test_generation_is_deterministic(tiny, tmp_path):
    cfg, root = tiny
    pipeline.generate_data(cfg, tmp_path / "again")
    assert _digest(root / "data", "**/*.png") == _digest(tmp_path / "again", "**/*.png")


def test_load_dataset(tiny):
    _, root = tiny
    ds = pipeline.load_dataset(root / "data")
    assert ds.source.images.shape == (6, 16, 16, 3)
    assert len(ds.web) == 5 and ds.web_truth.shape == (5, 16, 16)
    assert list(ds.targets) == ["dusk", "fog", "tint"]
    assert ds.num_classes == 5


def test_missing_manifest_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="manifest"):
        pipeline.load_dataset(tmp_path)


def test_target_without_labels_rejected(tiny, tmp_path):
    _, root = tiny
    lines = (root / "data" / "manifest.jsonl").read_text().splitlines()
    stripped = []
    for line in lines:
        rec = json.loads(line)
        rec["path"] = str(root / "data" / rec["path"])
        if rec["split"] == "target":
            rec.pop("label")
        else:
            rec["label"] = str(root / "data" / rec["label"])
        stripped.append(json.dumps(rec))
    (tmp_path / "manifest.jsonl").write_text("\n".join(stripped) + "\n")
    with pytest.raises(ManifestError, match="label"):
        pipeline.load_dataset(tmp_path)


def test_web_subset_nested_sizes(tiny):
    _, root = tiny
    ds = pipeline.load_dataset(root / "data")
    assert len(pipeline.web_subset(ds, 0.4, 0)) == 2
    assert len(pipeline.web_subset(ds, 1.0, 0)) == 5
    np.testing.assert_array_equal(pipeline.web_subset(ds, 0.4, 3), pipeline.web_subset(ds, 0.4, 3))


@pytest.fixture(scope="module")
def tiny_run(tiny):
    cfg, root = tiny
    report = pipeline.run_pipeline(cfg, root / "data", root / "run_a", seeds=[0, 1])
    return cfg, root, report


def test_run_outputs(tiny_run):
    _, root, report = tiny_run
    rows = list(csv.reader(report.open()))
    assert rows[0] == ["domain", "Src. only", "SI", "PL"]
    assert [r[0] for r in rows[1:]] == ["dusk", "fog", "tint", "mean"]
    for seed in (0, 1):
        d = root / "run_a" / f"seed_{seed}"
        for stage in ("source_only", "stage1_SI", "stage2_PL"):
            assert (d / f"{stage}.ckpt").is_file() and (d / f"loss_{stage}.csv").is_file()
        assert len(list((d / "pseudo_labels").glob("*.png"))) == 5
    meta = json.loads((root / "run_a" / "run_meta.json").read_text())
    assert "started" in meta and meta["seeds"] == [0, 1]


def test_provenance_matches_pseudo_label_files(tiny_run):
    _, root, _ = tiny_run
    d = root / "run_a" / "seed_0"
    prov = json.loads((d / "provenance.json").read_text())["stage2_PL"]
    files = sorted((d / "pseudo_labels").glob("*.png"))
    assert prov["pseudo_label_count"] == len(files)
    assert prov["pseudo_labels_sha256"] == pipeline._sha256_files(files)
    assert prov["initial_checkpoint_sha256"] == hashlib.sha256((d / "stage1_SI.ckpt").read_bytes()).hexdigest()
    for f in files:
        assert load_labels(f).shape == (16, 16)


def test_report_is_seed_mean(tiny_run):
    _, root, report = tiny_run
    per_seed = []
    for seed in (0, 1):
        rows = list(csv.reader((root / "run_a" / f"seed_{seed}" / "scores.csv").open()))
        per_seed.append({r[0]: [float(v) for v in r[1:4]] for r in rows[1:]})
    rows = list(csv.reader(report.open()))
    dusk_si = float(rows[1][2])
    assert dusk_si == pytest.approx(np.mean([p["stage1_SI"][0] for p in per_seed]), abs=0.011)


def test_run_is_byte_identical_and_independent_of_jobs(tiny_run):
    cfg, root, _ = tiny_run
    pipeline.run_pipeline(cfg, root / "data", root / "run_b", seeds=[0, 1], jobs=2)
    for pattern in ("**/*.ckpt", "**/*.csv", "**/*.png", "**/provenance.json"):
        assert _digest(root / "run_a", pattern) == _digest(root / "run_b", pattern)


def test_sweeps_write_summaries(tiny, tmp_path):
    cfg, root = tiny
    for fn, key, names in (
        (pipeline.sweep_tau, "tau", ["0.1", "0.005"]),
        (pipeline.sweep_method, "method", ["none", "adain"]),
        (pipeline.sweep_points, "points", ["1", "1+2"]),
        (pipeline.sweep_corpus, "corpus", ["0.4", "1"]),
    ):
        path = fn(cfg, root / "data", tmp_path / key, seeds=[0])
        rows = list(csv.reader(path.open()))
        assert rows[0][0] == key and [r[0] for r in rows[1:]] == names
        assert (tmp_path / key / f"sweep_{key}_runs.csv").is_file()


def test_eval_checkpoint(tiny_run, tmp_path):
    _, root, _ = tiny_run
    text = pipeline.evaluate_checkpoint(root / "run_a" / "seed_0" / "stage2_PL.ckpt", root / "data", tmp_path / "eval.csv")
    rows = list(csv.reader(text.splitlines()))
    assert rows[0][:2] == ["domain", "miou"] and rows[-1][0] == "mean"
    with pytest.raises(ConfigError):
        pipeline.evaluate_checkpoint(tmp_path / "missing.ckpt", root / "data")


# --------------------------------------------------------------------------- CLI


def test_pretty_table_aligns_columns():
    text = pipeline.pretty_table("domain,SI\ndusk,1.00\nmean,12.50\n")
    lines = text.splitlines()
    assert lines[0].split() == ["domain", "SI"] and set(lines[1]) <= {"-", " "}
    assert len({len(line) for line in lines}) == 1


def test_empty_sweep_list_rejected(tiny, tmp_path):
    cfg, root = tiny
    empty = parse_config(TINY + "\n").with_overrides(sweep=type(cfg.sweep)(tau=()))
    with pytest.raises(ConfigError, match="empty"):
        pipeline.sweep_tau(empty, root / "data", tmp_path, seeds=[0])


def test_cli_print_config(capsys):
    assert cli.main(["print-config"]) == 0
    out = capsys.readouterr().out
    assert parse_config(out) == parse_config("")


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[stage1]\nlearning_rate = fast\n")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_cli_missing_data_names_path(tmp_path, capsys):
    assert cli.main(["run", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "nodata" in capsys.readouterr().err


def test_cli_runtime_error_exit_code(tiny, tmp_path, capsys):
    _, root = tiny
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    code = cli.main(["eval", "--config", str(root / "tiny.ini"), "--data", str(root / "data"), "--out", str(tmp_path), "--checkpoint", str(junk)])
    assert code == cli.EXIT_RUNTIME


def test_cli_gen_data_run_and_bench(tiny, tmp_path, capsys):
    _, root = tiny
    ini = str(root / "tiny.ini")
    assert cli.main(["gen-data", "--config", ini, "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["run", "--config", ini, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--seed", "3"]) == 0
    assert (tmp_path / "r" / "seed_3" / "stage2_PL.ckpt").is_file()
    assert not (tmp_path / "r" / "seed_0").exists()
    assert cli.main(["bench", "--config", ini, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "bench.csv").read_text().startswith("path,n,channels")
