"""Command-line entry point: ``shockctl {run,compare,sweep,validate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .experiment import (
    POLICIES,
    SWEEPABLE,
    ConfigError,
    Scenario,
    load_scenario,
    scenario_from_mapping,
    sweep,
)
from .report import (
    compare_with_residual,
    run_with_residual,
    write_compare_report,
    write_run_report,
    write_sweep_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VALIDATION = 4

log = logging.getLogger("shockctl")


def _scenario(args) -> Scenario:
    scn = load_scenario(args.config) if args.config else scenario_from_mapping({})
    if args.horizon is not None:
        scn = replace(scn, horizon=args.horizon).validate()
    return scn


def _setup_logging(out_dir: Optional[Path], quiet: bool) -> None:
    root = logging.getLogger("shockctl")
    root.handlers.clear()
    root.setLevel(logging.INFO)
    root.propagate = False
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    if not quiet:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(fmt)
        root.addHandler(h)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out_dir / "run.log", mode="w")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _status_line(label: str, result) -> str:
    s = result.summary
    parts = [f"{label}: {result.status}"]
    if result.exit is not None:
        parts.append(f"exit {result.exit.side} at {result.exit.t:.2f} s")
    if s is not None and s.settle_time is not None:
        parts.append(f"settled by {s.settle_time:.2f} s")
    if result.error:
        parts.append(result.error)
    return ", ".join(parts)


def cmd_run(args) -> int:
    scn = _scenario(args)
    result, residual = run_with_residual(scn, args.policy)
    write_run_report(result, args.out_dir, residual, figures=not args.no_figures)
    print(_status_line(args.policy, result))
    return EXIT_SOLVER if result.status == "SolverError" else EXIT_OK


def cmd_compare(args) -> int:
    scn = _scenario(args)
    closed, opened, residual = compare_with_residual(scn)
    write_compare_report(closed, opened, args.out_dir, residual, figures=not args.no_figures)
    print(_status_line("closed loop", closed))
    print(_status_line("open loop", opened))
    failed = "SolverError" in (closed.status, opened.status)
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_sweep(args) -> int:
    scn = _scenario(args)
    if args.parameter not in SWEEPABLE:
        raise ConfigError(f"--parameter must be one of {sorted(SWEEPABLE)}, got {args.parameter!r}")
    results = sweep(scn, args.parameter, args.values, args.policy, workers=args.workers)
    write_sweep_report(args.parameter, results, args.out_dir)
    for value, res in results.items():
        print(_status_line(f"{args.parameter}={value:g}", res))
    failed = any(r.status == "SolverError" for r in results.values())
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_validate(args) -> int:
    from .validation import validate

    report = validate(seed=args.seed, progress=lambda r: print(r.line(), flush=True))
    n_ok = sum(r.passed for r in report.results)
    summary = f"{n_ok}/{len(report.results)} checks passed (seed {args.seed})"
    print(summary)
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validation.txt").write_text(report.text() + "\n")
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario file (INI sections, unit-suffixed keys)")
    common.add_argument("--horizon", type=float, help="override the simulated horizon in seconds")
    common.add_argument("--out-dir", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    common.add_argument("-q", "--quiet", action="store_true", help="no log output on stderr")

    p = argparse.ArgumentParser(prog="shockctl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="single run")
    r.add_argument("--policy", choices=POLICIES, default="backstepping")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", parents=[common], help="closed loop against open loop")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", parents=[common], help="one run per parameter value")
    s.add_argument("--policy", choices=POLICIES, default="backstepping")
    s.add_argument("--parameter", required=True, help=f"one of {', '.join(sorted(SWEEPABLE))}")
    s.add_argument("--values", type=_float_list, required=True, help="comma-separated values")
    s.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="run the property suite")
    v.add_argument("--seed", type=int, default=0, help="seed for random test fields")
    v.add_argument("--out-dir", type=Path, default=None, help="also write validation.txt here")
    v.add_argument("-q", "--quiet", action="store_true")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "out_dir", None) if args.command != "validate" else None,
                   args.quiet)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
