"""Command-line front end for the control-point pipeline.

Exit codes: 0 success, 2 unreadable inputs or bad configuration, 3
numerical failure, 4 a required result came out empty. Argparse itself
also exits 2 on unknown flags, which lands in the same bucket.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .errors import (
    EmptyResultError,
    GeometryError,
    ParseError,
    PeakError,
    RegistrationError,
    ValidationError,
)
from .simulate import build_scene, preset

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_EMPTY = 4

_STAGE_COMMANDS = {
    "detect": pipeline.run_detect,
    "pta": pipeline.run_pta,
    "screen": pipeline.run_screen,
    "correct": pipeline.run_correct,
    "solve": pipeline.run_solve,
    "report": pipeline.run_report,
    "run-all": pipeline.run_all,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sargcp",
        description="Detect, measure, and position radar control points.")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate",
                         help="build a synthetic scene plus a run manifest")
    sim.add_argument("--preset", default="minimal",
                     choices=("minimal", "berlin", "oulu"))
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--epochs", type=int, default=None)
    sim.add_argument("--method", default="road",
                     choices=pipeline.METHODS,
                     help="detection method the written manifest selects")
    sim.add_argument("--out", required=True, help="scene directory")

    for name in _STAGE_COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} stage")
        cmd.add_argument("--manifest", required=True)
        cmd.add_argument("--out", default=None,
                         help="override the manifest's output directory")
        if name in ("pta", "run-all"):
            cmd.add_argument("--threads", type=int, default=1)
    return parser


def _write_run_manifest(scene_dir: Path, method: str) -> Path:
    cp = configparser.ConfigParser()
    cp["pipeline"] = {"scene_dir": ".", "method": method, "out_dir": "out"}
    cp[method] = {}
    path = scene_dir / "pipeline.ini"
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


def _run_simulate(args) -> int:
    cfg = preset(args.preset)
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = dataclasses.replace(cfg, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = build_scene(cfg, out)
    manifest = _write_run_manifest(out, args.method)
    log.info("scene with %d targets at %s, manifest %s",
             len(truth.targets), out, manifest)
    print(f"scene: {out}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def _run_stage(args) -> int:
    manifest = pipeline.PipelineManifest.load(args.manifest)
    if args.out is not None:
        manifest = dataclasses.replace(manifest,
                                       out_dir=Path(args.out).resolve())
    runner = _STAGE_COMMANDS[args.command]
    if args.command in ("pta", "run-all"):
        runner(manifest, threads=args.threads)
    else:
        runner(manifest)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return _run_simulate(args)
        return _run_stage(args)
    except (ParseError, ValidationError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (GeometryError, PeakError, RegistrationError,
            np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EmptyResultError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())
