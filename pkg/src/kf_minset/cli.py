"""Command line entry point ``kf-minset``.

Exit codes: 0 success, 1 configuration error, 2 pipeline error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod
from . import pipeline
from .errors import ConfigError, KfMinsetError, StageError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PIPELINE = 2

SUBCOMMANDS = ("synth", "sample", "loops", "pgo", "eval", "run-batch", "run-online")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kf-minset", description="Keyframe sampling and SLAM back-end benchmark.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=_u64, help="run seed (overrides seed)")
        p.add_argument("--method", action="append", default=[], help="restrict to these methods")
        if name == "synth":
            p.add_argument("--format", choices=("kitti", "tum"), default="kitti")
    return ap


def _dispatch(args) -> None:
    cfg = cfgmod.load(args.config).with_overrides(args.seed, args.method, args.out)
    cfgmod.validate(cfg)
    cmd = args.command
    if cmd == "synth":
        out = pipeline.stage_synth(cfg, args.format)
        print(f"dataset written to {out}")
    elif cmd == "sample":
        pipeline.stage_sample(cfg)
    elif cmd == "loops":
        pipeline.stage_loops(cfg)
    elif cmd == "pgo":
        pipeline.stage_pgo(cfg)
    elif cmd == "eval":
        print(pipeline.stage_eval(cfg).render(), end="")
    elif cmd == "run-batch":
        report, _ = pipeline.run_batch(cfg)
        print(report.render(), end="")
    elif cmd == "run-online":
        report, _ = pipeline.run_online(cfg)
        print(report.render(), end="")


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; a bad command line is a configuration error here
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"kf-minset: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"kf-minset: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (KfMinsetError, OSError, ValueError) as exc:
        print(f"kf-minset: pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
