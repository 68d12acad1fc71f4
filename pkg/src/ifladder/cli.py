"""Command-line driver.

    ifladder --config run.yaml --out runs/a --stage all
    ifladder --out runs/report --stage report runs/a runs/b

Exit codes: 0 success, 2 config error, 3 upstream artifact missing, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import pipeline
from .config import ConfigError, load
from .curvature import CurvatureTooLarge
from .data import DataFormatError
from .evaluation import EvaluationError
from .linalg import EigenDecompositionError
from .model import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_NUMERIC = 0, 2, 3, 4
STAGE_CHOICES = (*pipeline.STAGES, "report", "all")

log = logging.getLogger("ifladder")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifladder", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker processes for retraining (default: all cores); never changes results")
    p.add_argument("--stage", choices=STAGE_CHOICES, default="all")
    p.add_argument("--seed", type=int, help="override the base seed (replaces any seed sweep)")
    p.add_argument("--force", action="store_true", help="rerun stages even when cached")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("runs", nargs="*", type=Path, help="run directories to combine (report stage only)")
    return p


def _report_inputs(paths: list[Path]) -> list[Path]:
    """Accept both output roots (expanded to their evaluated settings) and single setting directories."""
    out = []
    for p in paths:
        if (p / "evaluate").is_dir():
            out.append(p)
        else:
            found = pipeline.evaluated_settings(p)
            if not found:
                raise pipeline.UpstreamMissing(f"{p}: no evaluated settings; run --stage evaluate first")
            out.extend(found)
    return out


def _run(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    if args.stage == "report" and args.config is None:
        man = pipeline.report(_report_inputs(args.runs), args.out / "report")
        print(f"report: {len(man['settings'])} settings -> {args.out / 'report'}")
        return EXIT_OK
    if args.config is None:
        raise ConfigError("--config is required for this stage")
    cfg = load(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be a non-negative 64-bit integer")
        cfg = replace(cfg, seed=args.seed, sweep=replace(cfg.sweep, seeds=()))
    pipeline.write_root_manifest(cfg, args.out)
    stages = pipeline.STAGES if args.stage == "all" else (args.stage,)
    runs = pipeline.setting_runs(cfg, args.out, args.jobs)
    for stage in stages:
        if stage == "report":
            break
        for run in runs:
            hit, man = pipeline.run_stage(run, stage, force=args.force)
            digests = ", ".join(f"{k} {v[:12]}" for k, v in sorted(man["outputs"].items())[:3])
            print(f"{stage} {run.setting.name}: {'cache hit' if hit else 'done'} ({digests})")
    if args.stage in ("report", "all"):
        inputs = _report_inputs(args.runs) if args.runs else [r.dir for r in runs]
        man = pipeline.report(inputs, args.out / "report")
        print(f"report: {len(man['settings'])} settings -> {args.out / 'report'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, DataFormatError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.UpstreamMissing as exc:
        print(f"missing upstream: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (TrainingDiverged, EigenDecompositionError, EvaluationError, CurvatureTooLarge,
            FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
