"""Command line interface: ``run``, ``convergence`` and ``verify``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .forms import DensityPositivityError
from .io import (ConfigError, ConvergenceStudyError, OutputError, format_convergence_table,
                 parse_config, run_case, run_convergence_study, write_convergence_csv)
from .ssn import SSNError
from .timeloop import NonConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bingham-dg", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run a benchmark case from a config file")
    r.add_argument("--config", required=True, help="TOML run configuration")
    r.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable)")
    r.add_argument("--output", help="output directory (overrides [output] directory)")
    r.add_argument("--quiet", action="store_true")
    c = sub.add_parser("convergence", help="channel convergence study")
    c.add_argument("--levels", type=int, required=True, help="number of mesh levels (>= 2)")
    c.add_argument("--tau-s", type=float, default=0.25, help="yield stress (default 0.25)")
    c.add_argument("--output", default=".", help="directory for convergence.csv")
    sub.add_parser("verify", help="run the property checks and print pass/fail")
    return ap


def _run(args) -> int:
    cfg = parse_config(args.config, args.set)
    log = None if args.quiet else print
    result = run_case(cfg, args.output, log=log)
    print(f"wrote outputs to {result.output_dir}")
    return EXIT_OK


def _convergence(args) -> int:
    if args.levels < 2:
        raise ConfigError(f"must be >= 2, got {args.levels}", "--levels")
    if args.tau_s < 0:
        raise ConfigError(f"must be >= 0, got {args.tau_s}", "--tau-s")
    path = Path(args.output) / "convergence.csv"
    try:
        rows = run_convergence_study(args.levels, args.tau_s, path)
    except ConvergenceStudyError as exc:
        print(format_convergence_table(exc.rows))
        raise
    print(format_convergence_table(rows))
    write_convergence_csv(rows, path)
    print(f"wrote {path}")
    return EXIT_OK


def _verify(args) -> int:
    from .verify import run_all

    results = run_all()
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"run": _run, "convergence": _convergence, "verify": _verify}
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, ConvergenceStudyError, SSNError, DensityPositivityError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        ck = getattr(exc, "checkpoint", None)
        if ck is not None:
            print(f"last good state written to {ck}", file=sys.stderr)
        return EXIT_SOLVER
    except (OutputError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
