"""Command-line entry point: ``qbsde {certify,solve,validate,contraction}``.

Exit codes: 0 success, 1 configuration error, 3 certification negative,
4 solver non-convergence (also a violated contraction bound).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .certificate import DELTA_DENOMINATOR, LAMBDA_POINTS, ConstantLedger, certify
from .pasting import json_safe, solve_full, window_bounds
from .paths import TimeGrid, generate_ensemble
from .picard import MODES, contraction_probe, random_start
from .problem import ConfigError, ProblemSpec
from .validation import run_suite

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNCERTIFIED = 3
EXIT_NONCONVERGED = 4

log = logging.getLogger("qbsde")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``KEY=VALUE`` overrides; dotted keys reach nested objects, values parse as JSON."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form KEY=VALUE")
        key, value = item.split("=", 1)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not an object")
            node = node[part]
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(path: str, overrides: Sequence[str] = ()) -> ProblemSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return ProblemSpec.from_dict(apply_overrides(data, overrides))


def _emit(obj: dict, out) -> None:
    out.write(json.dumps(json_safe(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")


def _grid_options(args) -> dict:
    if args.lambda_points < 1 or args.delta_denominator < 2:
        raise ConfigError("--lambda-points must be >= 1 and --delta-denominator >= 2")
    return {"lambda_points": args.lambda_points, "delta_denominator": args.delta_denominator}


def cmd_certify(args, out) -> int:
    spec = load_config(args.config, args.set)
    ledger = certify(spec, **_grid_options(args))
    _emit(ledger.to_dict(), out)
    return EXIT_OK if ledger.existence_gate else EXIT_UNCERTIFIED


def cmd_solve(args, out) -> int:
    spec = load_config(args.config, args.set)
    if args.paths < 1 or args.steps < 1:
        raise ConfigError("--paths and --steps must be at least 1")
    try:
        ledger = certify(spec, force_delta=args.force_delta, **_grid_options(args))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _, report = solve_full(spec, ledger, args.paths, args.steps, args.seed, args.mode)
    config = Path(args.config)
    config.with_name(config.stem + ".trace.csv").write_text(report.trace_csv())
    out.write(report.to_json())
    if not report.converged:
        log.error("window %d did not converge", report.failing_window)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_validate(args, out) -> int:
    failures = []
    for case in run_suite(args.suite, args.tol_multiplier):
        out.write(case.row() + "\n")
        out.flush()
        if not case.passed:
            failures.append(case)
    if failures:
        first = failures[0]
        log.error(
            "first failure: %s expected %s actual %s (tolerance %.3g, se %s)",
            first.name, first.expected, first.actual, first.tolerance, first.se,
        )
        out.write(f"{len(failures)} case(s) failed\n")
        return EXIT_NONCONVERGED
    out.write("all cases passed\n")
    return EXIT_OK


def contraction_table(spec: ProblemSpec, ledger: ConstantLedger, trials: int, seed: int, n_paths: int, steps: int, mode: str):
    """Probe ratios on the last window for ``trials`` random start pairs, plus one identical pair."""
    t0, t1 = window_bounds(spec.T, ledger.delta)[-1]
    ens = generate_ensemble(TimeGrid(t0, t1, steps), n_paths, spec.k, seed)
    R = math.exp(ledger.R_log) if ledger.R_log is not None and ledger.R_log < 700 else math.inf
    rows = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        a = random_start(spec, ens, rng, R=R)
        b = random_start(spec, ens, rng, R=R)
        res = contraction_probe(spec, ens, a, b, mode)
        rows.append({"trial": trial, "ratio": res.ratio, "se": res.se})
    same = random_start(spec, ens, np.random.default_rng([seed, trials]), R=R)
    res = contraction_probe(spec, ens, same, same, mode)
    rows.append({"trial": "identical", "ratio": res.ratio, "se": res.se})
    return rows


def cmd_contraction(args, out) -> int:
    spec = load_config(args.config, args.set)
    ledger = certify(spec, **_grid_options(args))
    if not ledger.existence_gate:
        log.error("problem is not certified; no probe run")
        _emit({"ledger": ledger.to_dict(), "probes": []}, out)
        return EXIT_UNCERTIFIED
    rows = contraction_table(spec, ledger, args.trials, args.seed, args.paths, args.steps, args.mode)
    bound = ledger.contraction_factor
    worst = max(rows, key=lambda r: r["ratio"])
    ok = all(r["ratio"] <= bound + 3 * r["se"] for r in rows)
    for r in rows:
        log.info("trial %s: ratio %.6g (se %.3g) bound %.6g", r["trial"], r["ratio"], r["se"], bound)
    _emit(
        {
            "version": __version__,
            "seed": args.seed,
            "lambda": ledger.lam,
            "bound": bound,
            "probes": rows,
            "max_ratio": worst["ratio"],
            "within_bound": ok,
        },
        out,
    )
    return EXIT_OK if ok else EXIT_NONCONVERGED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbsde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="problem JSON document")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--lambda-points", type=int, default=LAMBDA_POINTS, help="size of the lambda search grid")
        p.add_argument("--delta-denominator", type=int, default=DELTA_DENOMINATOR, help="delta grid is m / this")

    p = sub.add_parser("certify", help="print the constant ledger")
    with_config(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("solve", help="solve on [0, T] and print the report")
    with_config(p)
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=50, help="time steps per full window")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="girsanov")
    p.add_argument("--force-delta", type=float, default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="run the built-in oracle and invariant cases")
    p.add_argument("--suite", choices=("all", "oracles", "invariants"), default="all")
    p.add_argument("--tol-multiplier", type=float, default=1.0)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("contraction", help="probe the Picard map's contraction ratio")
    with_config(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paths", type=int, default=5_000)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--mode", choices=MODES, default="girsanov")
    p.set_defaults(func=cmd_contraction)
    return parser


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        # evaluation-time problems with the declared problem, e.g. a table generator in solve
        log.error("invalid problem: %s", exc)
        return EXIT_CONFIG


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
