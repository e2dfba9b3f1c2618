from __future__ import annotations

import math
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qbsde.certificate import (
    ALPHA_FLOOR,
    InfeasibleDeltaError,
    PropositionGateError,
    certify,
    compute_alpha,
    compute_beta,
    compute_C6,
    compute_K,
    lambda_grid,
    limit_term,
    log_alpha,
    log_beta,
    log_C6,
    log_K,
    search_delta,
    window_terms_log,
)
from qbsde.problem import GeneratorSpec, ProblemSpec, TerminalSpec

E401 = math.exp(-401.0)


def problem(C1, C2, C3, C4, T=1.0):
    return ProblemSpec(1, 1, T, C1, C2, C3, C4, TerminalSpec("constant", value=(C1,)), GeneratorSpec("zero"))


def test_K_examples():
    assert compute_K(0.1, 1.0) == pytest.approx(200 * math.log(10), rel=1e-12)
    assert compute_K(1.0, E401) == pytest.approx(802.0, rel=1e-12)
    with pytest.raises(PropositionGateError, match="C1\\*C3"):
        compute_K(1.0, 1.0)


def test_beta_examples():
    assert compute_beta(0.1, 1.0) == pytest.approx(0.005, rel=1e-12)
    assert log_beta(1.0, E401) == pytest.approx(-401.0 - math.log(2), rel=1e-12)
    assert compute_beta(0.1, 2.0) == pytest.approx(2 * compute_beta(0.1, 1.0))


def test_alpha_examples():
    assert compute_alpha(0.1, 1.0, 1.0, 0.0) == pytest.approx(0.1 / 721.034037, rel=1e-8)
    assert compute_alpha(0.1, 0.0, 1.0, 0.0) == ALPHA_FLOOR
    assert compute_alpha(0.1, 2.0, 1.0, 0.0) == pytest.approx(2 * compute_alpha(0.1, 1.0, 1.0, 0.0), rel=1e-12)


def test_C6_examples():
    assert math.exp(compute_C6(0.1, 1.0, 1.0, 0.0, deltaT=0.5)) == pytest.approx(0.217840689491, rel=1e-9)
    assert compute_C6(1.0, 0.0, E401, 0.0, deltaT=0.3) == pytest.approx(802 - math.log(802), rel=1e-12)
    limit = 1.0 / (1.0 * (-2 * math.log(0.1)))
    assert math.exp(log_C6(0.1, 1.0, 1.0, 0.0, 0.0)) == pytest.approx(limit, rel=1e-12)


@given(
    st.floats(-12, 3),
    st.floats(-420, -1),
    st.floats(0, 5),
    st.floats(0, 5),
)
def test_ledger_identities(log_c1, log_c1c3, C2, C4):
    C1 = math.exp(log_c1)
    log_c3 = log_c1c3 - log_c1
    C3 = math.exp(log_c3)
    if C3 == 0 or C1 * C3 == 0 and log_c1c3 > -700:
        return
    lk = log_K(C1, C3)
    # C3 beta e^{K C1^2} = 1/2 with e^{K C1^2} = (C1 C3)^-2
    residual = log_c3 + log_beta(C1, C3) - 2 * (math.log(C1) + math.log(C3))
    assert residual == pytest.approx(-math.log(2), abs=1e-9)
    # 2K - C3/beta - (C1 C2 + C4)/alpha >= 0, scaled by C1^2 to stay finite
    scaled = 2 * math.exp(lk + 2 * log_c1) - 2.0
    if C1 * C2 + C4 > 0:
        scaled -= (C1 * C2 + C4) * C1**2 / math.exp(log_alpha(C1, C2, C3, C4))
    assert scaled >= -1e-9 * max(1.0, abs(scaled))
    # C6 increasing in deltaT
    assert log_C6(C1, C2, C3, C4, 0.5) >= log_C6(C1, C2, C3, C4, 0.25)


def test_search_delta_examples():
    with pytest.raises(InfeasibleDeltaError):
        search_delta(0.1, 1.0, 1.0, 0.0, 0.1, 1.0)
    assert search_delta(1.0, 0.0, E401, 0.0, 0.1, 1.0) == (1023 / 1024, 2)


def test_search_delta_strict_boundary():
    lam = 0.1
    c3 = math.exp(-4 / lam**2)
    assert limit_term(1.0, c3) == pytest.approx(lam, rel=1e-15)
    if limit_term(1.0, c3) >= lam:
        with pytest.raises(InfeasibleDeltaError):
            search_delta(1.0, 0.0, c3, 0.0, lam, 1.0)


@pytest.mark.parametrize("C4", [0.0, 0.01, 0.05])
def test_feasible_deltas_form_a_prefix(C4):
    C1, C3, lam = 1.0, E401, 0.105
    feasible = []
    for m in range(1, 64):
        dT = m / 64
        terms = window_terms_log(C1, 0.0, C3, C4, dT, log_C6(C1, 0.0, C3, C4, dT))
        feasible.append(max(terms) <= math.log(lam))
    assert feasible == sorted(feasible, reverse=True)
    if any(feasible):
        assert search_delta(C1, 0.0, C3, C4, lam, 1.0, 64)[0] == sum(feasible) / 64


def test_lambda_grid():
    grid = lambda_grid()
    assert len(grid) == 64 and grid[0] == pytest.approx(0.01) and grid[-1] < 1 / 9


def test_certify_ledger_example_runtime():
    start = time.perf_counter()
    led = certify(problem(0.1, 1.0, 1.0, 0.0), force_delta=0.5)
    assert time.perf_counter() - start < 1.0
    assert led.K == pytest.approx(460.517019, rel=1e-6)
    assert led.beta == pytest.approx(0.005, rel=1e-6)
    assert led.alpha == pytest.approx(1.386897e-4, rel=1e-6)
    assert led.C6 == pytest.approx(0.217840689491, rel=1e-6)
    assert led.prop_gate and not led.existence_gate


def test_certify_theorem_grade():
    led = certify(problem(1.0, 0.0, E401, 0.0))
    assert led.existence_gate and not led.uniqueness_gate and led.reference_gate
    assert led.binding_term == "2C3sqrt(R)"
    assert led.binding_value == pytest.approx(2 / math.sqrt(401), rel=1e-12)
    assert led.C6_log == pytest.approx(802 - math.log(802), rel=1e-12)
    assert led.windows == 2 and led.delta == 1023 / 1024
    assert led.contraction_factor < 1 and led.lam < 1 / 9
    assert led.tilde_R_log == pytest.approx(math.log(2) + led.R_log)
    assert math.isinf(led.C6)


def test_certify_reference_boundary():
    led = certify(problem(1.0, 0.0, math.exp(-324.0), 0.0))
    assert not led.existence_gate and not led.reference_gate


def test_certify_unattainable_and_degenerate():
    led = certify(problem(1.0, 0.0, 1.0, 0.0))
    assert not led.prop_gate and not led.existence_gate
    led = certify(problem(1.0, 0.0, 0.0, 0.0))
    assert led.prop_gate and not led.existence_gate and "C1*C3 = 0" in led.note


def test_certify_is_deterministic():
    a = certify(problem(1.0, 0.0, E401, 0.0)).to_dict()
    b = certify(problem(1.0, 0.0, E401, 0.0)).to_dict()
    assert a == b and "lambda" in a and "lam" not in a


def test_forced_delta_searches_lambda_only():
    led = certify(problem(1.0, 0.0, E401, 0.0), force_delta=0.25)
    assert led.forced_delta and led.delta == 0.25 and led.windows == 4
    assert led.existence_gate
    with pytest.raises(ValueError):
        certify(problem(1.0, 0.0, E401, 0.0), force_delta=1.5)
