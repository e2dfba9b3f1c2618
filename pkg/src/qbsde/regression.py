"""Least-squares conditional expectations on polynomial bases of the Brownian state.

The numerical ``E[. | F_t]`` is a (weighted) projection onto total-degree
monomials of ``W_t / scale_t``.  Process approximations store one coefficient
table per time step; the terminal slice is the exact terminal map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Protocol, Sequence

import numpy as np

from .paths import PathEnsemble, TimeGrid
from .problem import ProblemSpec, TerminalSpec, clip_to_ball, evaluate_terminal

log = logging.getLogger(__name__)

RIDGE = 1e-10
MAX_CONDITION = 1e14
BULK_QUANTILE = 0.99


class RegressionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    degree: int = 2
    include_terminal_feature: bool = False

    def exponents(self, k: int) -> list[tuple[int, ...]]:
        out = []
        for deg in range(self.degree + 1):
            out.extend(combinations_with_replacement(range(k), deg))
        return out

    def size(self, k: int) -> int:
        return math.comb(k + self.degree, self.degree) + int(self.include_terminal_feature)

    def design(self, states: np.ndarray, feature: np.ndarray | None = None) -> np.ndarray:
        """Design matrix ``[n, size]``; column 0 is the constant."""
        n, k = states.shape
        cols = []
        with np.errstate(over="ignore", invalid="ignore"):
            for combo in self.exponents(k):
                col = np.ones(n)
                for axis in combo:
                    col = col * states[:, axis]
                cols.append(col)
        if self.include_terminal_feature:
            if feature is None:
                raise ValueError("basis includes the terminal feature but none was supplied")
            cols.append(np.asarray(feature, dtype=float))
        return np.stack(cols, axis=1)

    def to_dict(self) -> dict:
        return {"degree": self.degree, "include_terminal_feature": self.include_terminal_feature}


def _solve(X: np.ndarray, targets: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    n, p = X.shape
    if n < 2 * p:
        raise ValueError(f"need at least {2 * p} samples for a basis of size {p}, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(targets))):
        raise RegressionError("design matrix or targets contain non-finite values")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float) / np.mean(weights)
    # shifting by a reference row makes constant targets exactly representable
    shift = targets[0].copy()
    centered = targets - shift
    Xw = X * w[:, None]
    A = X.T @ Xw
    A[np.diag_indices(p)] += RIDGE * np.trace(A) / p
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise RegressionError(f"design matrix is rank deficient after ridge: condition number {cond:.3e}")
    log.debug("normal equations: p=%d cond=%.3e", p, cond)
    coeffs = np.linalg.solve(A, Xw.T @ centered)
    coeffs[0] += shift
    return coeffs


def fit_conditional_expectation(
    states: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray | None = None,
    basis: BasisSpec = BasisSpec(),
    *,
    feature: np.ndarray | None = None,
    scale: float = 1.0,
) -> np.ndarray:
    """Weighted least-squares coefficients ``[basis, m]`` of ``targets`` on the basis of ``states``.

    Solved through ridge-stabilised normal equations (ridge ``1e-10 * trace / p``).
    Weights are normalised to mean one, so any constant weight vector reproduces the
    unweighted fit.
    """
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    squeeze = targets.ndim == 1
    if squeeze:
        targets = targets[:, None]
    coeffs = _solve(basis.design(states / scale, feature), targets, weights)
    return coeffs[:, 0] if squeeze else coeffs


def extract_Z(
    y_next: np.ndarray,
    increments: np.ndarray,
    states: np.ndarray,
    dt: float,
    basis: BasisSpec = BasisSpec(),
    *,
    weights: np.ndarray | None = None,
    drift: np.ndarray | None = None,
    center: bool = True,
    feature: np.ndarray | None = None,
    scale: float = 1.0,
) -> np.ndarray:
    """Coefficients ``[basis, d*k]`` of the martingale-representation integrand.

    Regresses ``y_next (dW + drift dt)^T / dt`` on the basis of ``states``.  With
    ``center`` the fitted ``E[y_next | state]`` is subtracted first; it is
    uncorrelated with the increment, so the estimator is unchanged in mean and far
    less noisy.
    """
    y_next = np.asarray(y_next, dtype=float)
    dW = np.asarray(increments, dtype=float)
    if drift is not None:
        dW = dW + np.asarray(drift, dtype=float) * dt
    X = basis.design(np.asarray(states, dtype=float) / scale, feature)
    if center:
        y_next = y_next - X @ _solve(X, y_next, weights)
    n, d = y_next.shape
    target = (y_next[:, :, None] * dW[:, None, :]).reshape(n, d * dW.shape[1]) / dt
    return _solve(X, target, weights)


# ---------------------------------------------------------------------------
# process approximations


class TerminalMap(Protocol):
    def __call__(self, states: np.ndarray) -> np.ndarray: ...

    def to_dict(self) -> dict: ...


@dataclass(frozen=True)
class ProblemTerminal:
    """The problem's own terminal value ``xi(W_T)``, clipped to C1."""

    terminal: TerminalSpec
    d: int
    bound: float

    @classmethod
    def of(cls, spec: ProblemSpec) -> "ProblemTerminal":
        return cls(spec.terminal, spec.d, spec.C1)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return evaluate_terminal(self.terminal, states, self.d, self.bound)

    def to_dict(self) -> dict:
        return {"kind": "problem", "terminal": self.terminal.to_dict(), "d": self.d, "bound": self.bound}


@dataclass(frozen=True, eq=False)
class YSlice:
    """The fitted Y of ``approx`` at step ``index`` used as a terminal value."""

    approx: "ProcessApprox"
    index: int = 0

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.approx.y(self.index, states)

    def to_dict(self) -> dict:
        return {"kind": "slice", "index": self.index, "approx": self.approx.to_dict()}


def state_scale(t: float) -> float:
    return math.sqrt(t) if t > 0 else 1.0


@dataclass(eq=False)
class ProcessApprox:
    """Per-step regression representation of ``(Y, Z)`` on a window grid.

    ``y_coeffs[i]`` (shape ``[p, d]``) and ``z_coeffs[i]`` (shape ``[p, d*k]``) give
    ``Y`` and ``Z`` at grid time ``i < steps``; ``Y`` at ``steps`` is ``terminal``.
    ``Y`` evaluations are radially clipped to ``clip_bound``.
    """

    grid: TimeGrid
    basis: BasisSpec
    d: int
    k: int
    y_coeffs: np.ndarray
    z_coeffs: np.ndarray
    clip_bound: float
    terminal: TerminalMap
    y0_se: float | None = None
    clip_events: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.grid.steps

    def scale(self, i: int) -> float:
        return state_scale(self.grid.times[i])

    def feature(self, states: np.ndarray) -> np.ndarray | None:
        if not self.basis.include_terminal_feature:
            return None
        return self.terminal(states)[:, 0]

    def design(self, i: int, states: np.ndarray) -> np.ndarray:
        return self.basis.design(states / self.scale(i), self.feature(states))

    def y(self, i: int, states: np.ndarray) -> np.ndarray:
        if i == self.steps:
            return self.terminal(states)
        return clip_to_ball(self.design(i, states) @ self.y_coeffs[i], self.clip_bound)

    def z(self, i: int, states: np.ndarray) -> np.ndarray:
        return (self.design(i, states) @ self.z_coeffs[i]).reshape(len(states), self.d, self.k)

    def minus(self, other: "ProcessApprox") -> "ProcessApprox":
        """Coefficient difference; only meaningful for Z (Y clipping is nonlinear)."""
        return ProcessApprox(
            self.grid,
            self.basis,
            self.d,
            self.k,
            self.y_coeffs - other.y_coeffs,
            self.z_coeffs - other.z_coeffs,
            math.inf,
            self.terminal,
        )

    @classmethod
    def constant(
        cls,
        grid: TimeGrid,
        basis: BasisSpec,
        d: int,
        k: int,
        y_value: np.ndarray,
        clip_bound: float,
        terminal: TerminalMap,
    ) -> "ProcessApprox":
        """``Y`` constant (clipped) and ``Z = 0`` on every step."""
        p = basis.size(k)
        y = np.zeros((grid.steps, p, d))
        y[:, 0, :] = clip_to_ball(np.asarray(y_value, dtype=float)[None, :], clip_bound)[0]
        return cls(grid, basis, d, k, y, np.zeros((grid.steps, p, d * k)), clip_bound, terminal)

    def to_dict(self) -> dict:
        return {
            "grid": {"t0": self.grid.t0, "t1": self.grid.t1, "steps": self.grid.steps},
            "basis": self.basis.to_dict(),
            "d": self.d,
            "k": self.k,
            "clip_bound": None if math.isinf(self.clip_bound) else self.clip_bound,
            "y_coeffs": self.y_coeffs.tolist(),
            "z_coeffs": self.z_coeffs.tolist(),
            "terminal": self.terminal.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProcessApprox":
        term = data["terminal"]
        if term["kind"] == "problem":
            terminal = ProblemTerminal(TerminalSpec.from_dict(term["terminal"]), term["d"], term["bound"])
        else:
            terminal = YSlice(cls.from_dict(term["approx"]), term["index"])
        bound = data["clip_bound"]
        return cls(
            TimeGrid(**data["grid"]),
            BasisSpec(**data["basis"]),
            data["d"],
            data["k"],
            np.asarray(data["y_coeffs"], dtype=float),
            np.asarray(data["z_coeffs"], dtype=float),
            math.inf if bound is None else bound,
            terminal,
        )


# ---------------------------------------------------------------------------
# norm estimators


@dataclass(frozen=True)
class NormEstimate:
    """Squared-norm estimate ``value`` with standard error ``se``.

    ``norm`` is the square root computed with rescaling, so it stays meaningful when
    ``value`` underflows.
    """

    value: float
    se: float
    norm: float
    time_index: int = 0

    def __float__(self) -> float:
        return self.value


Segments = Sequence[tuple[ProcessApprox, PathEnsemble]]


def _as_segments(approx, ensemble) -> list[tuple[ProcessApprox, PathEnsemble]]:
    if ensemble is None:
        return list(approx)
    return [(approx, ensemble)]


def _z_scale(segments) -> float:
    top = 0.0
    for approx, ens in segments:
        for i in range(approx.steps):
            z = approx.z(i, ens.states[:, i])
            top = max(top, float(np.max(np.abs(z))) if z.size else 0.0)
    return top


def estimate_bmo_norm(
    approx: ProcessApprox | Segments,
    ensemble: PathEnsemble | None = None,
    basis: BasisSpec | None = None,
) -> NormEstimate:
    """Estimate ``||Z||_B^2 = sup_t E[int_t^T |Z_s|^2 ds | F_t]``.

    The remaining quadratic sum is regressed on the state at each grid time; the
    estimate is the largest fitted value over grid times and the ensemble states
    inside the 99% quantile of the standardised state norm.  It
    can be given a single ``(approx, ensemble)`` or a forward-ordered list of
    contiguous segments whose ensembles share paths.  ``se`` is the standard error
    of the mean remaining sum at the maximising time.
    """
    segments = _as_segments(approx, ensemble)
    s = _z_scale(segments)
    if s == 0.0:
        return NormEstimate(0.0, 0.0, 0.0, 0)
    n = segments[0][1].n_paths
    remaining = np.zeros(n)
    best, best_se, best_i = -math.inf, 0.0, 0
    offset = sum(a.steps for a, _ in segments)
    for approx_j, ens in reversed(segments):
        fit_basis = basis or approx_j.basis
        for i in range(approx_j.steps - 1, -1, -1):
            offset -= 1
            states = ens.states[:, i]
            z = approx_j.z(i, states) / s
            remaining = remaining + np.einsum("nij,nij->n", z, z) * ens.grid.dt
            scaled = states / approx_j.scale(i)
            X = BasisSpec(fit_basis.degree).design(scaled)
            fitted = (X @ _solve(X, remaining[:, None], None))[:, 0]
            # polynomial fits are unreliable in the outer tail; take the sup over the bulk
            radius = np.linalg.norm(scaled, axis=1)
            top = float(np.max(fitted[radius <= np.quantile(radius, BULK_QUANTILE)]))
            if top > best:
                best, best_i = top, offset
                best_se = float(np.std(remaining) / math.sqrt(n))
    best = max(best, 0.0)
    return NormEstimate(best * s * s, best_se * s * s, s * math.sqrt(best), best_i)


def estimate_m2_norm(approx: ProcessApprox | Segments, ensemble: PathEnsemble | None = None) -> NormEstimate:
    """Ensemble mean of ``sum_s |Z_s|^2 dt`` over the whole grid."""
    segments = _as_segments(approx, ensemble)
    s = _z_scale(segments)
    if s == 0.0:
        return NormEstimate(0.0, 0.0, 0.0, 0)
    n = segments[0][1].n_paths
    total = np.zeros(n)
    for approx_j, ens in segments:
        for i in range(approx_j.steps):
            z = approx_j.z(i, ens.states[:, i]) / s
            total += np.einsum("nij,nij->n", z, z) * ens.grid.dt
    mean = float(np.mean(total))
    return NormEstimate(mean * s * s, float(np.std(total) / math.sqrt(n)) * s * s, s * math.sqrt(mean), 0)


def sup_distance(a: ProcessApprox, b: ProcessApprox, ensemble: PathEnsemble) -> float:
    """``max_{i, paths} |Y_a(t_i) - Y_b(t_i)|`` over the non-terminal grid times."""
    top = 0.0
    for i in range(a.steps):
        states = ensemble.states[:, i]
        diff = a.y(i, states) - b.y(i, states)
        top = max(top, float(np.max(np.linalg.norm(diff, axis=-1))))
    return top

