"""Solve on ``[0, T]`` window by window, right to left, handing Y across boundaries."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import numpy as np

from . import __version__
from .certificate import ConstantLedger
from .oracles import reference_value
from .paths import PathEnsemble, TimeGrid, generate_ensemble
from .picard import Mode, default_basis, iterate
from .problem import ProblemSpec
from .regression import (
    BasisSpec,
    ProblemTerminal,
    ProcessApprox,
    YSlice,
    estimate_bmo_norm,
    estimate_m2_norm,
)

log = logging.getLogger(__name__)


def window_bounds(T: float, delta: float | None) -> list[tuple[float, float]]:
    """Forward-ordered windows; all have length ``delta T`` except the leftmost, which is shorter or equal."""
    if delta is None or delta >= 1.0:
        return [(0.0, T)]
    count = math.ceil(Fraction(1) / Fraction(delta))
    width = delta * T
    edges = [0.0] + [T - j * width for j in range(count - 1, 0, -1)] + [T]
    return list(zip(edges[:-1], edges[1:]))


def window_steps(bounds: list[tuple[float, float]], steps_per_window: int) -> list[int]:
    full = bounds[-1][1] - bounds[-1][0]
    return [max(1, round(steps_per_window * (b - a) / full)) for a, b in bounds]


@dataclass
class PastedApprox:
    """Forward-ordered window approximations covering ``[0, T]``."""

    windows: list[ProcessApprox]

    @property
    def boundaries(self) -> list[float]:
        return [w.grid.t0 for w in self.windows] + [self.windows[-1].grid.t1]

    def window_at(self, t: float) -> tuple[int, int]:
        """Window and step index of the grid time at or left of ``t``."""
        for j, w in enumerate(self.windows):
            if t < w.grid.t1 or j == len(self.windows) - 1:
                i = int(np.searchsorted(w.grid.times, t, side="right")) - 1
                return j, min(max(i, 0), w.steps)
        raise ValueError(f"time {t} outside the solution interval")

    def y(self, t: float, states: np.ndarray) -> np.ndarray:
        j, i = self.window_at(t)
        return self.windows[j].y(i, states)

    def z(self, t: float, states: np.ndarray) -> np.ndarray:
        j, i = self.window_at(t)
        w = self.windows[j]
        return w.z(min(i, w.steps - 1), states)


def json_safe(value: Any) -> Any:
    """Replace non-finite floats so the JSON output stays standard."""
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return json_safe(value.item())
    return value


@dataclass
class WindowResult:
    index: int
    t0: float
    t1: float
    steps: int
    stream: int
    verdict: str
    iterations: int
    y_start_mean: list[float]
    y_start_se: float
    trace: dict
    warnings: list[str] = field(default_factory=list)


@dataclass
class SolveReport:
    problem: dict
    ledger: dict
    mode: str
    n_paths: int
    steps_per_window: int
    seed: int
    basis: dict
    windows: list[WindowResult]
    y0: list[float]
    y0_se: float
    z0: list[list[float]]
    norms: dict
    oracle: dict | None
    gates: dict
    best_effort: bool
    failing_window: int | None
    version: str = __version__

    @property
    def converged(self) -> bool:
        return self.failing_window is None

    def to_dict(self) -> dict:
        return json_safe(
            {
                "version": self.version,
                "problem": self.problem,
                "ledger": self.ledger,
                "mode": self.mode,
                "n_paths": self.n_paths,
                "steps_per_window": self.steps_per_window,
                "seeds": {"master": self.seed, "window_streams": [w.stream for w in self.windows]},
                "basis": self.basis,
                "windows": [vars(w) for w in self.windows],
                "y0": self.y0,
                "y0_se": self.y0_se,
                "z0": self.z0,
                "norms": self.norms,
                "oracle": self.oracle,
                "oracle_deviation_y0": None if self.oracle is None else self.oracle["deviation"],
                "gates": self.gates,
                "best_effort": self.best_effort,
                "failing_window": self.failing_window,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def trace_csv(self) -> str:
        """Per-iteration trace of every window with a leading ``window`` column."""
        lines = ["window,iter,dist_y,dist_z,ratio,clip_events"]
        for w in self.windows:
            for r in w.trace["records"]:
                ratio = "" if r["ratio"] is None else repr(r["ratio"])
                lines.append(f"{w.index},{r['iter']},{r['dist_y']!r},{r['dist_z']!r},{ratio},{r['clip_events']}")
        return "\n".join(lines) + "\n"


def _evaluation_chain(approx: PastedApprox, n_paths: int, k: int, seed: int) -> list[tuple[ProcessApprox, PathEnsemble]]:
    """Contiguous ensembles from ``W_0 = 0`` so path functionals span all windows."""
    segments = []
    start = np.zeros((n_paths, k))
    for j, w in enumerate(approx.windows):
        ens = generate_ensemble(w.grid, n_paths, k, seed, stream=j, initial=start)
        segments.append((w, ens))
        start = ens.terminal_states
    return segments


def solve_full(
    spec: ProblemSpec,
    ledger: ConstantLedger | None,
    n_paths: int,
    steps_per_window: int,
    seed: int,
    mode: Mode = "girsanov",
    *,
    basis: BasisSpec | None = None,
    max_iter: int = 50,
    tol: float = 1e-8,
    with_oracle: bool = True,
) -> tuple[PastedApprox, SolveReport]:
    """Solve every window from the right, each earlier one ending at its neighbour's Y slice.

    Without a usable ``delta`` in ``ledger`` the whole interval is one window and the
    report is flagged best-effort.  A window that does not converge is recorded in
    ``failing_window``; the remaining windows are still solved.
    """
    if n_paths < 1 or steps_per_window < 1:
        raise ValueError("n_paths and steps_per_window must be positive")
    delta = ledger.delta if ledger is not None else None
    best_effort = ledger is None or not ledger.existence_gate or ledger.forced_delta
    bounds = window_bounds(spec.T, delta)
    steps = window_steps(bounds, steps_per_window)
    terminal = ProblemTerminal.of(spec)
    basis = basis or default_basis(mode)
    solved: list[ProcessApprox | None] = [None] * len(bounds)
    results: list[WindowResult | None] = [None] * len(bounds)
    failing = None
    for j in range(len(bounds) - 1, -1, -1):
        t0, t1 = bounds[j]
        grid = TimeGrid(t0, t1, steps[j])
        ens = generate_ensemble(grid, n_paths, spec.k, seed, stream=j)
        approx, trace = iterate(
            spec, ens, mode, max_iter, tol, basis=basis, terminal=terminal, ledger=ledger
        )
        solved[j] = approx
        start = approx.y(0, ens.states[:, 0])
        results[j] = WindowResult(
            index=j,
            t0=t0,
            t1=t1,
            steps=steps[j],
            stream=j,
            verdict=trace.verdict,
            iterations=len(trace.records),
            y_start_mean=np.mean(start, axis=0).tolist(),
            y_start_se=float(approx.y0_se or 0.0),
            trace=trace.to_dict(),
            warnings=list(approx.warnings),
        )
        log.info("window %d [%g, %g]: %s after %d iterations", j, t0, t1, trace.verdict, len(trace.records))
        if trace.verdict != "converged" and failing is None:
            failing = j
        # the same stored object serves as the left neighbour's terminal value
        terminal = YSlice(approx, 0)

    pasted = PastedApprox(solved)
    origin = np.zeros((1, spec.k))
    first = solved[0]
    y0 = first.y(0, origin)[0].tolist()
    z0 = first.z(0, origin)[0].tolist()
    y0_se = math.hypot(*(r.y_start_se for r in results))

    chain = _evaluation_chain(pasted, n_paths, spec.k, seed)
    bmo = estimate_bmo_norm(chain)
    m2 = estimate_m2_norm(chain)
    norms: dict[str, Any] = {"bmo_sq": bmo.value, "bmo_se": bmo.se, "bmo": bmo.norm, "m2_sq": m2.value, "m2_se": m2.se}
    if ledger is not None and ledger.tilde_R_log is not None:
        norms["tilde_R_log"] = ledger.tilde_R_log
        norms["tilde_R_check"] = ledger.tilde_R_log > 700 or bmo.value <= math.exp(ledger.tilde_R_log) + 3 * bmo.se

    oracle = None
    if with_oracle:
        ref = reference_value(spec)
        if ref is not None:
            dev = y0[0] - ref.y0
            oracle = {
                "name": ref.name,
                "y0": ref.y0,
                "z0": ref.z0,
                "deviation": dev,
                "within_3se": abs(dev) <= 3 * y0_se,
            }

    gates = {}
    if ledger is not None:
        gates = {
            "prop_gate": ledger.prop_gate,
            "existence_gate": ledger.existence_gate,
            "uniqueness_gate": ledger.uniqueness_gate,
            "reference_gate": ledger.reference_gate,
        }
    report = SolveReport(
        problem=spec.to_dict(),
        ledger=ledger.to_dict() if ledger is not None else {},
        mode=mode,
        n_paths=n_paths,
        steps_per_window=steps_per_window,
        seed=seed,
        basis=basis.to_dict(),
        windows=results,
        y0=y0,
        y0_se=y0_se,
        z0=z0,
        norms=norms,
        oracle=oracle,
        gates=gates,
        best_effort=best_effort,
        failing_window=failing,
    )
    return pasted, report
