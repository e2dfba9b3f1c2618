"""The Picard map (Y, Z) -> (Y~, Z~) on one window, its iteration, and probes.

Given the current iterate, ``Y~_t = E_Q[xi | F_t]`` where ``dQ/dP`` is the
stochastic exponential of ``-int f(Y, Z) dW``, and ``Z~`` is the integrand of
``Y~`` against ``W^Q = W + int f(Y, Z) dt``.  Equivalently ``dY~ = Z~ f(Y, Z) dt + Z~ dW``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .certificate import ConstantLedger
from .paths import PathEnsemble, conditional_log_weights
from .problem import ProblemSpec, clip_to_ball
from .regression import (
    BasisSpec,
    NormEstimate,
    ProblemTerminal,
    ProcessApprox,
    TerminalMap,
    estimate_bmo_norm,
    extract_Z,
    fit_conditional_expectation,
    sup_distance,
)

log = logging.getLogger(__name__)

Mode = Literal["girsanov", "frozen-driver"]
MODES = ("girsanov", "frozen-driver")
CLIP_WARN_FRACTION = 0.01


def _shifted_mean(values: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Mean that returns identical rows bit-for-bit."""
    ref = values[0]
    w = np.ones(len(values)) if weights is None else weights
    return ref + (w[:, None] * (values - ref)).sum(axis=0) / w.sum()


def _mean_se(values: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Standard error of the (self-normalised) mean of vector rows, Euclidean."""
    n = len(values)
    top = float(np.max(np.abs(values), initial=0.0))
    if top == 0.0 or not math.isfinite(top):
        return 0.0 if top == 0.0 else math.inf
    values = values / top
    if weights is None:
        return top * float(math.sqrt(np.sum(np.var(values, axis=0)) / n))
    w = weights / weights.sum()
    mean = _shifted_mean(values, weights)
    return top * float(math.sqrt(np.sum(w[:, None] ** 2 * (values - mean) ** 2)))


def default_basis(mode: Mode) -> BasisSpec:
    """Quadratic for girsanov; quartic for frozen-driver.

    The frozen-driver estimate of ``Y_0`` is built from cross-moments of the
    increments, and a degree-n basis reproduces them only up to order n.
    """
    return BasisSpec(4) if mode == "frozen-driver" else BasisSpec(2)


def initial_iterate(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    basis: BasisSpec = BasisSpec(),
    terminal: TerminalMap | None = None,
) -> ProcessApprox:
    """``Y0`` = ensemble mean of the terminal value (clipped) as a constant, ``Z0 = 0``."""
    terminal = terminal or ProblemTerminal.of(spec)
    xi = terminal(ensemble.terminal_states)
    return ProcessApprox.constant(ensemble.grid, basis, spec.d, spec.k, _shifted_mean(xi), spec.C1, terminal)


def driver_values(current: ProcessApprox, spec: ProblemSpec, ensemble: PathEnsemble) -> np.ndarray:
    """``f(Y_t, Z_t)`` at the left endpoint of every step, shape ``[n, steps, k]``."""
    n, steps = ensemble.n_paths, ensemble.grid.steps
    out = np.empty((n, steps, spec.k))
    for i in range(steps):
        states = ensemble.states[:, i]
        out[:, i] = spec.f(current.y(i, states), current.z(i, states))
    return out


def phi_step(
    current: ProcessApprox,
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    mode: Mode = "girsanov",
    basis: BasisSpec | None = None,
) -> ProcessApprox:
    """Apply the Picard map once on the window covered by ``ensemble``.

    ``girsanov``: ``Y~`` at each step is the regression of ``xi`` weighted by the
    conditional density of Q; ``Z~`` regresses ``Y~_{t+dt}`` against the
    Q-increment ``dW + f dt`` under the one-step density.
    ``frozen-driver``: backward recursion ``y_t = E[y_{t+dt} - dt z~_t f(Y_t, Z_t) | W_t]``
    with ``z~_t`` the plain covariation estimate, evaluated in multi-step form.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    basis = basis or current.basis
    grid = ensemble.grid
    steps, dt, n = grid.steps, grid.dt, ensemble.n_paths
    d, k = spec.d, spec.k
    states = ensemble.states
    inc = ensemble.increments
    terminal = current.terminal
    fvals = driver_values(current, spec, ensemble)
    xi = terminal(states[:, steps])

    p = basis.size(k)
    new = ProcessApprox(
        grid, basis, d, k, np.zeros((steps, p, d)), np.zeros((steps, p, d * k)), spec.C1, terminal
    )

    if mode == "girsanov":
        L, clipped = conditional_log_weights(inc, fvals, dt)
        new.clip_events = clipped
        for i in range(steps - 1, -1, -1):
            s_i = states[:, i]
            feat = new.feature(s_i)
            w = np.exp(L[:, i])
            new.y_coeffs[i] = fit_conditional_expectation(s_i, xi, w, basis, feature=feat, scale=new.scale(i))
            y_next = new.y(i + 1, states[:, i + 1])
            f_i = fvals[:, i]
            w1 = np.exp(-np.einsum("nk,nk->n", f_i, inc[:, i]) - 0.5 * dt * np.einsum("nk,nk->n", f_i, f_i))
            new.z_coeffs[i] = extract_Z(
                y_next, inc[:, i], s_i, dt, basis, weights=w1, drift=f_i, feature=feat, scale=new.scale(i)
            )
        new.y0_se = _mean_se(xi, np.exp(L[:, 0]))
        if clipped > CLIP_WARN_FRACTION * L.size:
            msg = f"log-weight clipping on {clipped} of {L.size} entries"
            new.warnings.append(msg)
            log.warning(msg)
    else:
        # multi-step form: fitting the pathwise sum at every step equals the one-step
        # recursion by the tower property, without compounding projection error
        y_next = xi
        pathwise = xi.copy()
        for i in range(steps - 1, -1, -1):
            s_i = states[:, i]
            feat = new.feature(s_i)
            new.z_coeffs[i] = extract_Z(y_next, inc[:, i], s_i, dt, basis, feature=feat, scale=new.scale(i))
            pathwise -= dt * np.einsum("ndk,nk->nd", new.z(i, s_i), fvals[:, i])
            new.y_coeffs[i] = fit_conditional_expectation(s_i, pathwise, None, basis, feature=feat, scale=new.scale(i))
            y_next = new.y(i, s_i)
        new.y0_se = _mean_se(pathwise)
    return new


# ---------------------------------------------------------------------------
# iteration


@dataclass
class IterationRecord:
    iter: int
    dist_y: float
    dist_z: float
    ratio: float | None
    clip_events: int
    z_bmo_sq: float
    z_bmo_se: float
    y_bmo_bound_check: bool | None


@dataclass
class ConvergenceTrace:
    records: list[IterationRecord] = field(default_factory=list)
    verdict: str = "running"

    @property
    def converged(self) -> bool:
        return self.verdict == "converged"

    def distances(self) -> list[float]:
        return [r.dist_y + r.dist_z for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iter", "dist_y", "dist_z", "ratio", "clip_events"])
        for r in self.records:
            writer.writerow([r.iter, repr(r.dist_y), repr(r.dist_z), "" if r.ratio is None else repr(r.ratio), r.clip_events])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "records": [asdict(r) for r in self.records]}


def check_prop_bound(
    z_before_bmo_sq: float | NormEstimate,
    z_after_bmo_sq: float | NormEstimate,
    ledger: ConstantLedger,
    se: float | None = None,
) -> bool:
    """``||Z~||_B^2 <= C6 + ||Z||_B^2 / 2 + 3 SE``.

    ``se`` defaults to the combined standard error of the two estimates when they
    are :class:`NormEstimate` instances, else 0.
    """
    if ledger.C6_log is None:
        raise ValueError("ledger carries no C6; certify a problem with positive C1*C3 first")
    if se is None:
        se = math.hypot(getattr(z_before_bmo_sq, "se", 0.0), getattr(z_after_bmo_sq, "se", 0.0))
    before, after = float(z_before_bmo_sq), float(z_after_bmo_sq)
    if ledger.C6_log > 700:
        return True
    return after <= math.exp(ledger.C6_log) + 0.5 * before + 3.0 * se


def iterate(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    mode: Mode = "girsanov",
    max_iter: int = 50,
    tol: float = 1e-8,
    *,
    basis: BasisSpec | None = None,
    terminal: TerminalMap | None = None,
    ledger: ConstantLedger | None = None,
    start: ProcessApprox | None = None,
) -> tuple[ProcessApprox, ConvergenceTrace]:
    """Repeat :func:`phi_step` until ``dist_y + dist_z <= tol * C1``.

    The ensemble is held fixed, so the iteration is a deterministic map on
    coefficient tables.  Three consecutive non-decreasing distances end the run
    with the verdict ``"no empirical contraction"``.
    """
    if max_iter < 1 or tol <= 0:
        raise ValueError("max_iter must be >= 1 and tol > 0")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    basis = basis or (start.basis if start is not None else default_basis(mode))
    current = start or initial_iterate(spec, ensemble, basis, terminal)
    threshold = tol * spec.C1 if spec.C1 > 0 else tol
    trace = ConvergenceTrace()
    bmo_current = estimate_bmo_norm(current, ensemble)
    check = ledger is not None and ledger.C6_log is not None
    previous = None
    rising = 0
    for it in range(1, max_iter + 1):
        new = phi_step(current, spec, ensemble, mode, basis)
        dist_y = sup_distance(new, current, ensemble)
        dist_z = estimate_bmo_norm(new.minus(current), ensemble).norm
        bmo_new = estimate_bmo_norm(new, ensemble)
        dist = dist_y + dist_z
        trace.records.append(
            IterationRecord(
                iter=it,
                dist_y=dist_y,
                dist_z=dist_z,
                ratio=None if previous in (None, 0.0) else dist / previous,
                clip_events=new.clip_events,
                z_bmo_sq=bmo_new.value,
                z_bmo_se=bmo_new.se,
                y_bmo_bound_check=check_prop_bound(bmo_current, bmo_new, ledger) if check else None,
            )
        )
        log.debug("iteration %d: dist_y=%.3e dist_z=%.3e", it, dist_y, dist_z)
        current, bmo_current = new, bmo_new
        if dist <= threshold:
            trace.verdict = "converged"
            return current, trace
        if previous is not None and dist >= previous:
            rising += 1
            if rising >= 3:
                trace.verdict = "no empirical contraction"
                return current, trace
        else:
            rising = 0
        previous = dist
    trace.verdict = "max_iter"
    return current, trace


# ---------------------------------------------------------------------------
# contraction probe


@dataclass(frozen=True)
class ProbeResult:
    ratio: float
    se: float
    numerator: float
    denominator: float

    def __float__(self) -> float:
        return self.ratio


def _distance(a: ProcessApprox, b: ProcessApprox, ensemble: PathEnsemble) -> tuple[float, NormEstimate]:
    return sup_distance(a, b, ensemble), estimate_bmo_norm(a.minus(b), ensemble)


def contraction_probe(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    start_a: ProcessApprox,
    start_b: ProcessApprox,
    mode: Mode = "girsanov",
) -> ProbeResult:
    """Ratio of image distance to start distance, ``S-inf`` plus BMO norm parts.

    Identical starts give ratio 0.  ``se`` propagates the BMO estimator's standard
    error of the image difference.
    """
    dy, dz = _distance(start_a, start_b, ensemble)
    den = dy + dz.norm
    if den == 0.0:
        return ProbeResult(0.0, 0.0, 0.0, 0.0)
    img_a = phi_step(start_a, spec, ensemble, mode)
    img_b = phi_step(start_b, spec, ensemble, mode)
    ty, tz = _distance(img_a, img_b, ensemble)
    num = ty + tz.norm
    norm_se = tz.se / (2.0 * tz.norm) if tz.norm > 0 else 0.0
    return ProbeResult(num / den, norm_se / den, num, den)


def random_start(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    rng: np.random.Generator,
    *,
    R: float = math.inf,
    basis: BasisSpec = BasisSpec(),
    terminal: TerminalMap | None = None,
) -> ProcessApprox:
    """A random iterate in ``S-inf_{C1} x B_{sqrt(R)}`` (BMO membership by estimate)."""
    terminal = terminal or ProblemTerminal.of(spec)
    grid = ensemble.grid
    p = basis.size(spec.k)
    scale_z = math.sqrt(R) / 2 if math.isfinite(R) else max(spec.C1, 1e-300)
    y = rng.standard_normal((grid.steps, p, spec.d)) * spec.C1
    z = rng.standard_normal((grid.steps, p, spec.d * spec.k)) * scale_z
    start = ProcessApprox(grid, basis, spec.d, spec.k, y, z, spec.C1, terminal)
    if math.isfinite(R):
        est = estimate_bmo_norm(start, ensemble)
        if est.value > 0.9 * R:
            start.z_coeffs *= math.sqrt(0.9 * R / est.value)
    return start
