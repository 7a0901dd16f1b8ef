"""``wedge-kit`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .affinity import ConfigError
from .bench import bench_csv, continuous_not_slower, run_bench
from .config import dump_config, load_config, seeds_or_override
from .data import ManifestError
from . import pipeline

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("wedge_kit")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file overriding the defaults (see print-config)")
    common.add_argument("--seed", type=int, help="run this single seed instead of [run] seeds")
    common.add_argument("--out", help="output directory (default: [paths] out_dir, or data_dir for gen-data)")
    common.add_argument("--data", help="data directory (default: [paths] data_dir)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wedge-kit", description="Web-image style injection and pseudo-label experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("print-config", parents=[common], help="print the effective configuration as INI")
    sub.add_parser("gen-data", parents=[common], help="render the source, web and target splits")
    sub.add_parser("run", parents=[common], help="source-only, stage 1, pseudo labels, stage 2, report")
    sub.add_parser("sweep-tau", parents=[common], help="pseudo-label threshold sweep")
    sub.add_parser("sweep-method", parents=[common], help="injection method comparison")
    sub.add_parser("sweep-points", parents=[common], help="injection point sweep")
    sub.add_parser("sweep-corpus", parents=[common], help="web corpus size sweep")
    sub.add_parser("bench", parents=[common], help="time the injection paths")
    ev = sub.add_parser("eval", parents=[common], help="score one checkpoint on every target domain")
    ev.add_argument("--checkpoint", required=True)
    return p


SWEEPS = {
    "sweep-tau": pipeline.sweep_tau,
    "sweep-method": pipeline.sweep_method,
    "sweep-points": pipeline.sweep_points,
    "sweep-corpus": pipeline.sweep_corpus,
}


def _dispatch(args) -> int:
    cfg = load_config(args.config)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    data_dir = Path(args.data or cfg.paths.data_dir)
    out_dir = Path(args.out or cfg.paths.out_dir)
    seeds = seeds_or_override(cfg, args.seed)

    if args.command == "print-config":
        sys.stdout.write(dump_config(cfg))
    elif args.command == "gen-data":
        target = Path(args.out) if args.out else data_dir
        manifest = pipeline.generate_data(cfg, target)
        print(f"wrote {manifest}")
    elif args.command == "run":
        report = pipeline.run_pipeline(cfg, data_dir, out_dir, seeds, args.jobs)
        sys.stdout.write(pipeline.pretty_table(report.read_text(encoding="utf-8")))
        print(f"report: {report}")
    elif args.command in SWEEPS:
        path = SWEEPS[args.command](cfg, data_dir, out_dir, seeds, args.jobs)
        sys.stdout.write(pipeline.pretty_table(path.read_text(encoding="utf-8")))
        print(f"summary: {path}")
    elif args.command == "bench":
        b = cfg.bench
        rows = run_bench(b.sizes, b.channels, b.repetitions, b.knn_k, args.seed if args.seed is not None else b.seed)
        text = bench_csv(rows)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench.csv").write_text(text, encoding="utf-8")
        sys.stdout.write(pipeline.pretty_table(text))
        if any(n >= 2048 for n in b.sizes):
            verdict = "yes" if continuous_not_slower(rows) else "no"
            print(f"cosine_dense median <= knn median at every n >= 2048: {verdict}")
    elif args.command == "eval":
        text = pipeline.evaluate_checkpoint(args.checkpoint, data_dir, out_dir / "eval.csv")
        sys.stdout.write(pipeline.pretty_table(text))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
