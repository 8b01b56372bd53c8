"""Command-line interface.

    smolm simulate <scene.csv> --out DIR [--config FILE] [--set key=value]
    smolm reconstruct <frames> --out DIR [--config FILE] [--set key=value]
    smolm benchmark --out DIR [--quick] [--config FILE] [--set key=value]
    smolm dna-axis <localizations.csv> --out DIR [--degree N]

Exit codes: 0 on success, 2 on configuration or argument errors, 3 on
processing failures (bad input data, failed frames).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .io import FormatError
from .solver import SolverError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="chatty progress logging")


def _simulate(args) -> int:
    from .pipeline import run_simulate

    cfg = load_config(args.config, args.overrides)
    if args.frames is not None:
        cfg.simulate.n_frames = args.frames
    if args.seed is not None:
        cfg.simulate.seed = args.seed
    result = run_simulate(cfg, args.scene, args.out)
    print(f"wrote {result.n_frames} frame(s) to {result.frames_path}")
    return 0


def _reconstruct(args) -> int:
    from .pipeline import run_reconstruct

    cfg = load_config(args.config, args.overrides)
    if args.solver_log:
        cfg.reconstruct.solver_log = 1
    result = run_reconstruct(cfg, args.frames, args.out)
    print(f"{result.n_localizations} localization(s) from {result.n_frames} "
          f"frame(s) -> {result.table_path}")
    if result.failed_frames:
        print(f"{len(result.failed_frames)} frame(s) failed: "
              f"{result.failed_frames}", file=sys.stderr)
        return 3
    return 0


def _benchmark(args) -> int:
    from .pipeline import run_benchmark

    cfg = load_config(args.config, args.overrides)
    if args.quick:
        cfg.benchmark.trials = min(cfg.benchmark.trials, 20)
        cfg.benchmark.orientation_trials = min(cfg.benchmark.orientation_trials, 10)
        cfg.benchmark.misalignment_trials = min(cfg.benchmark.misalignment_trials, 20)
        cfg.benchmark.overlap_trials = min(cfg.benchmark.overlap_trials, 10)
    result = run_benchmark(cfg, args.out)
    print(f"benchmark report -> {result.report_path}")
    return 0


def _dna_axis(args) -> int:
    from .pipeline import run_dna_axis

    cfg = load_config(args.config, args.overrides)
    if args.degree is not None:
        cfg.dna.degree = args.degree
    result = run_dna_axis(cfg, args.table, args.out)
    print(f"{result.n_rows} row(s) -> {result.table_path}; "
          f"median |delta phi| = {result.median_abs_delta_phi_rad:.4f} rad")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smolm",
        description="Simulate and invert orientation-sensitive single-molecule images",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="render a scene into a noisy frame stack")
    p.add_argument("scene", help="scene CSV (s,x_nm,y_nm,theta_rad,phi_rad,gamma)")
    p.add_argument("--frames", type=int, default=None, help="number of frames")
    p.add_argument("--seed", type=int, default=None, help="noise seed")
    _add_common(p)
    p.set_defaults(func=_simulate)

    p = sub.add_parser("reconstruct", help="localize emitters in a frame stack")
    p.add_argument("frames", help="TIFF stack or SMBASIS1 frame container")
    p.add_argument("--solver-log", action="store_true",
                   help="write per-frame iteration traces")
    _add_common(p)
    p.set_defaults(func=_reconstruct)

    p = sub.add_parser("benchmark", help="run the reference accuracy studies")
    p.add_argument("--quick", action="store_true", help="reduced trial counts")
    _add_common(p)
    p.set_defaults(func=_benchmark)

    p = sub.add_parser("dna-axis", help="azimuth relative to a fitted filament axis")
    p.add_argument("table", help="localization table CSV")
    p.add_argument("--degree", type=int, default=None, help="axis polynomial degree")
    _add_common(p)
    p.set_defaults(func=_dna_axis)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, SolverError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
