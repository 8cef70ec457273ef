"""Command-line entry point.

Exit codes: 0 success, 1 bound violation or identity failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config, with_overrides
from .densities import DensityError
from .diagnostics import DiagnosticsError
from .engine import EngineError
from .harness import emit_report, prepare, run_experiment, support_table, verify_identities
from .priors import PriorError, dump_prior

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sieverates", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the configured experiments and write reports")
    run.add_argument("config")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, help="override run.master_seed")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for replications")

    sup = sub.add_parser("check-support", help="print the local prior-support table")
    sup.add_argument("config")

    ident = sub.add_parser("verify-identities", help="run only the exact-identity suite")
    ident.add_argument("config")

    dump = sub.add_parser("dump-prior", help="write the configured prior to a file")
    dump.add_argument("config")
    dump.add_argument("--out", required=True)
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_overrides(cfg, master_seed=args.seed)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    report = run_experiment(cfg, jobs=args.jobs)
    emit_report(report, args.out)
    for failure in report.failures():
        print(f"FAIL {failure}")
    print(f"{'PASS' if report.passed else 'FAIL'}: reports written to {args.out}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _cmd_support(args) -> int:
    cfg = load_config(args.config)
    table = support_table(cfg)
    print(f"{'variant':<9} {'n':>7} {'eps^2':>12} {'mass':>12} {'required':>12} {'log_margin':>12}  ok")
    for variant, rows in table.items():
        for r in rows:
            print(f"{variant:<9} {r.n:>7d} {r.eps_sq:>12.5g} {r.neighborhood_mass:>12.5g} "
                  f"{r.required_mass:>12.5g} {r.log_margin:>12.5g}  {'yes' if r.satisfied else 'no'}")
    return EXIT_OK


def _cmd_identities(args) -> int:
    cfg = load_config(args.config)
    results = verify_identities(cfg)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<28} max_error={r.max_error:.3e} tol={r.tolerance:g}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _cmd_dump(args) -> int:
    cfg = load_config(args.config)
    dump_prior(prepare(cfg).prior, args.out)
    print(f"prior written to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "check-support": _cmd_support,
    "verify-identities": _cmd_identities,
    "dump-prior": _cmd_dump,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, PriorError, DensityError, EngineError, DiagnosticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
