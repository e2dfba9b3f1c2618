"""Constant ledger for the existence/uniqueness certificate.

Every quantity involving ``exp(K C1^2)`` is carried as a natural logarithm,
using ``exp(K C1^2) = (C1 C3)^-2``.  For theorem-grade inputs (``C1 C3`` around
``e^-400``) the plain values overflow double precision.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .problem import ProblemSpec

PROP_THRESHOLD = math.exp(-0.5)
REFERENCE_THRESHOLD = math.exp(-324.0)
ALPHA_FLOOR = 1e-300
LAMBDA_POINTS = 64
LAMBDA_MIN = 1e-2
LAMBDA_MAX = 1.0 / 9.0
DELTA_DENOMINATOR = 1024
_LN2 = math.log(2.0)


class PropositionGateError(ValueError):
    """Raised when C1*C3 >= e^{-1/2}: no admissible K exists."""


class InfeasibleDeltaError(ValueError):
    """Raised when no grid delta satisfies the window condition for a given lambda."""


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _logaddexp(a: float, b: float) -> float:
    hi = max(a, b)
    if hi == -math.inf:
        return -math.inf
    return hi + math.log1p(math.exp(-abs(a - b)))


def _product_below(C1: float, C3: float, threshold: float) -> bool:
    """``C1*C3 < threshold`` without trusting log rounding at the boundary."""
    prod = C1 * C3
    if prod > 1e-300 or prod == 0.0 and (C1 == 0.0 or C3 == 0.0):
        return prod < threshold
    return _log(C1) + _log(C3) < math.log(threshold)


def _log_c1c3(C1: float, C3: float) -> float:
    return _log(C1) + _log(C3)


def compute_K(C1: float, C3: float) -> float:
    """``K = -(2 / C1^2) ln(C1 C3)``; may be ``inf`` when C1 is tiny (see :func:`log_K`)."""
    return math.exp(log_K(C1, C3)) if log_K(C1, C3) < 709.0 else math.inf


def log_K(C1: float, C3: float) -> float:
    if C1 <= 0 or C3 <= 0:
        raise ValueError(f"C1 and C3 must be positive, got C1={C1!r}, C3={C3!r}")
    if not _product_below(C1, C3, PROP_THRESHOLD):
        raise PropositionGateError(
            f"proposition hypothesis fails: C1*C3 = {C1 * C3!r} is not below e^-1/2 = {PROP_THRESHOLD!r}"
        )
    lc = _log_c1c3(C1, C3)
    lk = math.log(-2.0 * lc) - 2.0 * math.log(C1)
    # K - C3^2 e^{K C1^2} > 0  <=>  ln K > 2 ln C3 - 2 ln(C1 C3)
    assert lk > 2.0 * math.log(C3) - 2.0 * lc
    return lk


def compute_beta(C1: float, C3: float, K: float | None = None) -> float:
    """``beta = 1 / (2 C3 e^{K C1^2}) = C1^2 C3 / 2``."""
    return C1 * C1 * C3 / 2.0


def log_beta(C1: float, C3: float) -> float:
    return 2.0 * _log(C1) + _log(C3) - _LN2


def log_alpha(C1: float, C2: float, C3: float, C4: float) -> float:
    """Log of the minimal alpha with ``2K - C3/beta - (C1 C2 + C4)/alpha >= 0``.

    Since ``C3/beta = 2/C1^2``, the denominator is ``(2/C1^2)(-2 ln(C1 C3) - 1)``.
    """
    lc = _log_c1c3(C1, C3)
    if not -2.0 * lc - 1.0 > 0:
        raise PropositionGateError(f"2K - C3/beta is not positive for C1*C3 = {C1 * C3!r}")
    lnum = _logaddexp(_log(C1) + _log(C2), _log(C4))
    if lnum == -math.inf:
        return math.log(ALPHA_FLOOR)
    return lnum + 2.0 * math.log(C1) - _LN2 - math.log(-2.0 * lc - 1.0)


def compute_alpha(C1: float, C2: float, C3: float, C4: float, K: float | None = None, beta: float | None = None) -> float:
    if K is not None and beta is not None and math.isfinite(K) and beta > 0:
        if not 2.0 * K - C3 / beta > 0:
            raise PropositionGateError("2K - C3/beta must be positive")
    if C1 * C2 + C4 == 0:
        return ALPHA_FLOOR
    return math.exp(log_alpha(C1, C2, C3, C4))


def log_C6(C1: float, C2: float, C3: float, C4: float, deltaT: float, alpha_log: float | None = None) -> float:
    """``ln C6 = -2 ln(C1 C3) + ln(C1^2 / (-2 ln(C1 C3)) + alpha (C1 C2 + C4) deltaT)``.

    ``deltaT = 0`` gives the limit ``C6(0+)``.
    """
    lc = _log_c1c3(C1, C3)
    if alpha_log is None:
        alpha_log = log_alpha(C1, C2, C3, C4)
    first = 2.0 * math.log(C1) - math.log(-2.0 * lc)
    second = alpha_log + _logaddexp(_log(C1) + _log(C2), _log(C4)) + _log(deltaT)
    return -2.0 * lc + _logaddexp(first, second)


def compute_C6(C1, C2, C3, C4, alpha=None, K=None, deltaT=0.0) -> float:
    """Returns ``ln C6`` (the plain value overflows for theorem-grade inputs)."""
    alpha_log = None if alpha is None else math.log(alpha)
    return log_C6(C1, C2, C3, C4, deltaT, alpha_log)


def window_terms_log(C1, C2, C3, C4, deltaT, C6_log) -> tuple[float, float, float]:
    """Logs of ``2(C1C2+C4)sqrt(dT)``, ``2 C2 sqrt(dT) sqrt(R)``, ``2 C3 sqrt(R)`` with ``R = 2 C6``."""
    half_R = 0.5 * (_LN2 + C6_log)
    half_dT = 0.5 * _log(deltaT)
    a = _LN2 + _logaddexp(_log(C1) + _log(C2), _log(C4)) + half_dT
    b = _LN2 + _log(C2) + half_dT + half_R
    c = _LN2 + _log(C3) + half_R
    return a, b, c


def limit_term(C1: float, C3: float) -> float:
    """The delta-free floor ``2 C3 sqrt(2 C6(0+)) = 2 / sqrt(-ln(C1 C3))``."""
    return 2.0 / math.sqrt(-_log_c1c3(C1, C3))


def windows_for(delta: float) -> int:
    return math.ceil(Fraction(1) / Fraction(delta))


def search_delta(C1, C2, C3, C4, lam: float, T: float, denominator: int = DELTA_DENOMINATOR) -> tuple[float, int]:
    """Largest ``delta = m/denominator`` with all three window terms ``<= lam``.

    The floor ``2/sqrt(-ln(C1 C3))`` must lie strictly below ``lam``; on that
    boundary no delta qualifies even if the other terms vanish.
    """
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam!r}")
    if not limit_term(C1, C3) < lam:
        raise InfeasibleDeltaError(
            f"no delta works for lambda={lam!r}: floor term 2/sqrt(-ln(C1*C3)) = {limit_term(C1, C3)!r}"
        )
    alpha_log = log_alpha(C1, C2, C3, C4)
    m = np.arange(1, denominator)
    dT = m / denominator * T
    lc = _log_c1c3(C1, C3)
    lnum = _logaddexp(_log(C1) + _log(C2), _log(C4))
    first = 2.0 * math.log(C1) - math.log(-2.0 * lc)
    C6_log = -2.0 * lc + np.logaddexp(first, alpha_log + lnum + np.log(dT))
    half_R = 0.5 * (_LN2 + C6_log)
    half_dT = 0.5 * np.log(dT)
    a = _LN2 + lnum + half_dT
    b = _LN2 + _log(C2) + half_dT + half_R
    c = _LN2 + _log(C3) + half_R
    ok = np.maximum(np.maximum(a, b), c) <= math.log(lam)
    if not ok.any():
        raise InfeasibleDeltaError(f"no grid delta satisfies the window condition for lambda={lam!r}")
    top = int(m[ok][-1])
    delta = top / denominator
    return delta, windows_for(delta)


def lambda_grid(points: int = LAMBDA_POINTS, lam_min: float = LAMBDA_MIN) -> np.ndarray:
    """Logarithmic grid in ``[lam_min, 1/9)``; 1/9 itself is excluded."""
    return np.geomspace(lam_min, LAMBDA_MAX, points, endpoint=False)


@dataclass
class ConstantLedger:
    C1: float
    C2: float
    C3: float
    C4: float
    T: float
    prop_gate: bool
    existence_gate: bool
    uniqueness_gate: bool
    reference_gate: bool
    K: float | None = None
    K_log: float | None = None
    log_e_KC1sq: float | None = None
    beta: float | None = None
    beta_log: float | None = None
    alpha: float | None = None
    alpha_log: float | None = None
    C6_log: float | None = None
    R_log: float | None = None
    delta: float | None = None
    deltaT: float | None = None
    lam: float | None = None
    windows: int | None = None
    tilde_R_log: float | None = None
    contraction_factor: float | None = None
    binding_term: str | None = None
    binding_value: float | None = None
    forced_delta: bool = False
    note: str = ""

    @property
    def C6(self) -> float:
        return math.exp(self.C6_log) if self.C6_log is not None and self.C6_log < 709 else math.inf

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


def _contraction(lam: float) -> float:
    return 4.0 * lam / (1.0 - 5.0 * lam)


def certify(
    spec: ProblemSpec,
    *,
    lambda_points: int = LAMBDA_POINTS,
    lambda_min: float = LAMBDA_MIN,
    delta_denominator: int = DELTA_DENOMINATOR,
    force_delta: float | None = None,
) -> ConstantLedger:
    """Populate the constant ledger and decide the gates for ``spec``.

    The selected lambda is the smallest grid point admitting a feasible delta (the
    sharpest contraction factor); delta is then the largest feasible grid value.
    With ``force_delta`` the window length is fixed and only lambda is searched.
    Infeasibility is a verdict, never an exception.
    """
    C1, C2, C3, C4, T = spec.C1, spec.C2, spec.C3, spec.C4, spec.T
    ledger = ConstantLedger(
        C1=C1,
        C2=C2,
        C3=C3,
        C4=C4,
        T=T,
        prop_gate=_product_below(C1, C3, PROP_THRESHOLD),
        existence_gate=False,
        uniqueness_gate=False,
        reference_gate=_product_below(C1, C3, REFERENCE_THRESHOLD),
        forced_delta=force_delta is not None,
    )
    if force_delta is not None:
        if not 0 < force_delta <= 1:
            raise ValueError(f"forced delta must lie in (0, 1], got {force_delta!r}")
        ledger.delta = float(force_delta)
        ledger.deltaT = float(force_delta) * T
        ledger.windows = windows_for(force_delta)
    if not ledger.prop_gate:
        ledger.note = "C1*C3 >= e^-1/2: constants undefined"
        return ledger
    if C1 == 0 or C3 == 0:
        ledger.note = "C1*C3 = 0: the K formula is undefined; declare positive C1 and C3 to certify"
        return ledger

    ledger.K_log = log_K(C1, C3)
    ledger.K = compute_K(C1, C3)
    ledger.log_e_KC1sq = -2.0 * _log_c1c3(C1, C3)
    ledger.beta_log = log_beta(C1, C3)
    ledger.beta = compute_beta(C1, C3)
    ledger.alpha_log = log_alpha(C1, C2, C3, C4)
    ledger.alpha = compute_alpha(C1, C2, C3, C4)

    grid = lambda_grid(lambda_points, lambda_min)
    chosen = None
    if force_delta is not None:
        dT = ledger.deltaT
        terms = window_terms_log(C1, C2, C3, C4, dT, log_C6(C1, C2, C3, C4, dT, ledger.alpha_log))
        for lam in grid:
            if limit_term(C1, C3) < lam and max(terms) <= math.log(lam):
                chosen = (float(lam), ledger.delta, ledger.windows)
                break
    else:
        for lam in grid:
            try:
                delta, windows = search_delta(C1, C2, C3, C4, float(lam), T, delta_denominator)
            except InfeasibleDeltaError:
                continue
            chosen = (float(lam), delta, windows)
            break

    if chosen is not None:
        lam, delta, windows = chosen
        ledger.existence_gate = True
        ledger.lam = lam
        ledger.delta = delta
        ledger.deltaT = delta * T
        ledger.windows = windows
        ledger.contraction_factor = _contraction(lam)
        ledger.uniqueness_gate = math.sqrt(windows) * lam < LAMBDA_MAX
    elif force_delta is None:
        ledger.note = "no lambda on the grid admits a feasible delta; C6 reported at deltaT -> 0"

    dT = ledger.deltaT if ledger.deltaT is not None else 0.0
    ledger.C6_log = log_C6(C1, C2, C3, C4, dT, ledger.alpha_log)
    ledger.R_log = _LN2 + ledger.C6_log
    terms = window_terms_log(C1, C2, C3, C4, dT, ledger.C6_log)
    names = ("2(C1C2+C4)sqrt(dT)", "2C2sqrt(dT)sqrt(R)", "2C3sqrt(R)")
    i = int(np.argmax(terms))
    ledger.binding_term = names[i]
    ledger.binding_value = math.exp(terms[i]) if terms[i] < 709 else math.inf
    if ledger.windows is not None:
        ledger.tilde_R_log = math.log(ledger.windows) + ledger.R_log
    return ledger
