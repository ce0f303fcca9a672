"""
Command line entry point::

    flexkrylov run   --experiment fig1 --out results --csv --svg --audit
    flexkrylov audit --experiment fig3 --seed 7

Exit status: 0 on success, 1 on a usage error, 2 on a numerical failure
(a failed sub-run, or a flagged audit under ``audit``).
"""
from __future__ import annotations

import argparse
import sys
from typing import Dict, List, Optional

from .exceptions import InputError
from .experiments import EXPERIMENTS, METHODS, PRECONDITIONERS, ExperimentConfig, emit_report, \
    run_experiment

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

# config-file key -> (config field, parser)
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off", ""}


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _real_list(text: str):
    try:
        return tuple(float(t) for t in _csv_list(text))
    except ValueError:
        raise InputError(f"expected a comma-separated list of reals, got {text!r}")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _BOOL_TRUE:
        return True
    if t in _BOOL_FALSE:
        return False
    raise InputError(f"expected a boolean, got {text!r}")


_KEYS = {
    "experiment": ("experiment", str),
    "n": ("n", int),
    "kappa-max": ("kappa_max", float),
    "eta": ("eta_list", _real_list),
    "coarse": ("coarse_count", int),
    "iters": ("iterations", int),
    "seed": ("seed", int),
    "out": ("out", str),
    "csv": ("csv", _bool),
    "svg": ("svg", _bool),
    "audit": ("audit", _bool),
    "methods": ("methods", lambda t: tuple(_csv_list(t))),
    "modes": ("modes", lambda t: tuple(_csv_list(t))),
    "precond": ("preconditioner", str),
    "problem": ("problem", str),
    "tol": ("tolerance", float),
    "precision": ("precision", int),
}


def read_config_file(path: str) -> Dict[str, object]:
    """Parse flat ``key = value`` lines (``#`` starts a comment)."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}")
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{num}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        key = key.replace("_", "-")
        if key == "kappa":
            key = "kappa-max"
        if key not in _KEYS:
            raise InputError(f"{path}:{num}: unknown key {key!r}")
        name, parse = _KEYS[key]
        try:
            values[name] = parse(val)
        except ValueError:
            raise InputError(f"{path}:{num}: bad value {val!r} for {key}")
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flexkrylov",
                     description="Variable-preconditioner Krylov experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (("run", "run an experiment and write CSV/SVG/audit files"),
                            ("audit", "run an experiment's audit suites only")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--experiment", choices=EXPERIMENTS)
        p.add_argument("--n", type=int)
        p.add_argument("--kappa-max", type=float)
        p.add_argument("--eta", help="comma-separated eta values for inner CG")
        p.add_argument("--coarse", type=int, help="number of coarse points")
        p.add_argument("--iters", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--methods", help=f"comma-separated subset of {', '.join(METHODS)}")
        p.add_argument("--modes", help="comma-separated two-grid modes")
        p.add_argument("--precond", choices=PRECONDITIONERS, help="preconditioner (custom)")
        p.add_argument("--problem", choices=("laplacian", "diagonal"))
        p.add_argument("--tol", type=float, help="relative A-error tolerance")
        p.add_argument("--precision", type=int, help="working precision in bits (0: float64)")
        p.add_argument("--config", help="flat key=value file; flags override it")
        if name == "run":
            p.add_argument("--csv", action="store_true", default=None)
            p.add_argument("--svg", action="store_true", default=None)
            p.add_argument("--audit", action="store_true", default=None)
    return parser


def config_from_args(args) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    flags = {
        "experiment": args.experiment, "n": args.n, "kappa_max": args.kappa_max,
        "eta_list": _real_list(args.eta) if args.eta is not None else None,
        "coarse_count": args.coarse, "iterations": args.iters, "seed": args.seed,
        "out": args.out,
        "methods": tuple(_csv_list(args.methods)) if args.methods is not None else None,
        "modes": tuple(_csv_list(args.modes)) if args.modes is not None else None,
        "preconditioner": args.precond, "problem": args.problem, "tolerance": args.tol,
        "precision": args.precision,
    }
    for key in ("csv", "svg", "audit"):
        flags[key] = getattr(args, key, None)
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.command == "audit":
        values.update(csv=False, svg=False, audit=True)
    if "experiment" not in values:
        raise InputError("--experiment is required (on the command line or in --config)")
    return ExperimentConfig(**values).resolved()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except InputError as exc:
        print(f"flexkrylov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = run_experiment(cfg)
    for h in report.histories:
        status = f"FAILED: {h.failure}" if h.failure else h.termination
        print(f"{h.label:<28} steps={len(h.error_norms) - 1:<4} "
              f"mean_factor={h.mean_reduction:.6g}  {status}")
    if args.command == "audit":
        sys.stdout.write(report.audit_text())
        written = emit_report(report, audit=args.out is not None)
    else:
        written = emit_report(report)
    for path in written:
        print(f"wrote {path}")
    if report.failures or (args.command == "audit" and not report.audits_ok):
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
