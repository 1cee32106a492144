"""Command-line front end: ``stlod <command> --config FILE [--cache FILE] [--out FILE] [--workers N]``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import corrector, experiments
from .config import ConfigError, ExperimentConfig
from .errors import InvalidArgumentError, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("stlod")


def _write(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _operator(cfg, disc, args):
    if args.cache and Path(args.cache).exists():
        log.info("loading correctors from %s", args.cache)
        return corrector.load_operator(args.cache, disc)
    t0 = time.perf_counter()
    op = experiments.compute_correctors(cfg, disc, args.workers)
    log.info("computed %d corrector chains in %.1f s", len(op.templates), time.perf_counter() - t0)
    if args.cache:
        corrector.save_operator(op, disc, args.cache)
    return op


def cmd_correctors(cfg, args):
    disc = experiments.build_discretization(cfg)
    op = experiments.compute_correctors(cfg, disc, args.workers)
    out = args.out or args.cache
    if out is None:
        raise ConfigError("correctors needs --out (or --cache) for the cache file")
    corrector.save_operator(op, disc, out)
    log.info("wrote %d chains / %d blocks to %s (max constraint residual %.3g)",
             len(op.templates), len(op.blocks), out, op.max_constraint_residual)


def cmd_solve(cfg, args):
    disc = experiments.build_discretization(cfg)
    op = _operator(cfg, disc, args)
    rows, (e_tr, e_l2) = experiments.run_solve(cfg, disc, op)
    log.info("relative error: trial %.6g, L2(H1) %.6g", e_tr, e_l2)
    _write(experiments.csv_text(["t", "x", "y", "value"], rows), args.out)


def cmd_decay(cfg, args):
    rows = experiments.run_decay(cfg, args.workers)
    _write(experiments.csv_text(["kind", "parameter", "loc_error", "estimator"], rows), args.out)


def cmd_convergence(cfg, args):
    rows = experiments.run_convergence(
        cfg, args.workers, progress=lambda n, e: log.info("H=2^-%d: trial %.6g, L2(H1) %.6g", n, *e))
    H = [r[0] for r in rows]
    footer = ("slope", experiments.loglog_slope(H, [r[1] for r in rows]),
              experiments.loglog_slope(H, [r[2] for r in rows])) if len(rows) > 1 else ("slope", np.nan, np.nan)
    _write(experiments.csv_text(["H", "trial_error", "l2h1_error"], rows + [footer]), args.out)


def cmd_multirhs(cfg, args):
    disc = experiments.build_discretization(cfg)
    op = _operator(cfg, disc, args)
    errors, online = experiments.run_multirhs(cfg, disc, op)
    if online["chains_computed"]:
        raise NumericalFailure("correctors were recomputed during the online phase")
    log.info("%d right-hand sides: errors in [%.6g, %.6g]", len(errors), errors.min(), errors.max())
    rows = experiments.histogram_rows(errors, cfg.histogram_bins)
    _write(experiments.csv_text(["bin_left", "count"], rows), args.out)


def cmd_estimate(cfg, args):
    disc = experiments.build_discretization(cfg)
    op = _operator(cfg, disc, args)
    if args.zero_corrector:
        op = op.zeroed()
    rows = experiments.run_estimate(op, disc)
    dmax = max((r[2] for r in rows), default=np.nan)
    tmax = max((r[3] for r in rows), default=np.nan)
    _write(experiments.csv_text(["K", "i", "delta", "theta"], rows + [("max", "", dmax, tmax)]), args.out)


COMMANDS = {
    "correctors": cmd_correctors,
    "solve": cmd_solve,
    "decay": cmd_decay,
    "convergence": cmd_convergence,
    "multirhs": cmd_multirhs,
    "estimate": cmd_estimate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="stlod", description="Localized space-time multiscale experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat key = value experiment file")
    p.add_argument("--cache", help="corrector cache file (read if present, written otherwise)")
    p.add_argument("--out", help="output file (CSV, or the cache for 'correctors'); stdout if omitted")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--zero-corrector", action="store_true", help="debug: replace every corrector by zero")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = ExperimentConfig.load(args.config)
        COMMANDS[args.command](cfg, args)
    except OSError as exc:
        print(f"stlod: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalFailure as exc:
        print(f"stlod: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidArgumentError as exc:
        print(f"stlod: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
