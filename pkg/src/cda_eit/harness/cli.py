"""``cda-eit`` command line entry point.

Exit codes: 0 success, 1 failed experiment assertion, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .config import COMMANDS, ConfigError, bundled_configs, load_config

log = logging.getLogger("cda_eit")


def build_parser():
    p = argparse.ArgumentParser(prog="cda-eit", description="Certified descent for EIT inclusion identification.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True,
                   help=f"INI file or bundled name ({', '.join(bundled_configs())})")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _outdir(cfg):
    return Path(cfg.out) / cfg.name


def _print_run(report):
    print(f"{'iter':>4} {'J':>12} {'directional':>12} {'Ebar':>11} {'mu':>9} {'dofs':>7} {'retries':>7}")
    for r in report.records:
        print(f"{r.iter:>4} {r.J:>12.5e} {r.directional:>12.4e} {r.Ebar:>11.4e} {r.mu:>9.3g} {r.dofs:>7} {r.retries:>7}")
    print(f"stop: {report.stop_reason}  iterations: {len(report.records)}  seconds: {report.seconds:.1f}")
    print(f"interface: hausdorff {report.hausdorff:.4f}  max vertex distance {report.max_vertex_distance:.4f}"
          f"  mean edge {report.mean_edge:.4f}")


def run(cfg):
    """Execute ``cfg``; returns the process exit code."""
    out = _outdir(cfg)
    if cfg.command == "convergence":
        report = ex.cmd_convergence(cfg)
        print(report.table())
        ex.check_validation(report)
    elif cfg.command == "run":
        report = ex.cmd_run(cfg, outdir=out)
        _print_run(report)
        ex.check_run(report)
    elif cfg.command == "gradcheck":
        rows = ex.cmd_gradcheck(cfg)
        print(ex.gradcheck_table(rows))
        ex.check_gradcheck(rows)
    else:
        J, paths = ex.cmd_forward(cfg, outdir=out)
        print(f"J = {J:.10e}")
        for p in paths:
            print(f"wrote {p}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.command != args.command:
            raise ConfigError(f"config {args.config!r} is for command {cfg.command!r}, not {args.command!r}")
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except AssertionError as exc:
        print(f"FAILED: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
