from __future__ import annotations

import json
import math

import numpy as np
import pytest

from qbsde.certificate import certify
from qbsde.pasting import json_safe, solve_full, window_bounds, window_steps
from qbsde.problem import GeneratorSpec, builtin_problem


def test_window_bounds():
    assert window_bounds(1.0, None) == [(0.0, 1.0)]
    assert window_bounds(2.0, 1.0) == [(0.0, 2.0)]
    assert window_bounds(1.0, 0.5) == [(0.0, 0.5), (0.5, 1.0)]
    bounds = window_bounds(1.0, 0.4)
    assert len(bounds) == 3 and bounds[-1] == (0.6, 1.0)
    assert bounds[0][0] == 0.0 and bounds[0][1] == pytest.approx(0.2)
    # contiguous
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))


def test_window_steps():
    assert window_steps([(0.0, 0.5), (0.5, 1.0)], 10) == [10, 10]
    assert window_steps(window_bounds(1.0, 1023 / 1024), 50) == [1, 50]


def test_json_safe():
    out = json_safe({"a": math.inf, "b": [np.float64(-math.inf), math.nan], "c": np.int64(3)})
    assert out == {"a": "inf", "b": ["-inf", None], "c": 3}
    json.dumps(out, allow_nan=False)


def test_constant_terminal_across_windows():
    spec = builtin_problem((0.3, 0.4), GeneratorSpec("tanh-of-Y", c=(1.0, 1.0)), d=2, k=2, T=1.0, C3=1.0)
    led = certify(spec, force_delta=0.5)
    pasted, report = solve_full(spec, led, 2000, 5, 0)
    assert len(pasted.windows) == 2 and report.converged
    for w in pasted.windows:
        assert np.all(w.z_coeffs == 0.0)
    assert report.y0 == [0.3, 0.4]
    assert all(w.trace["records"][0]["dist_y"] == 0.0 for w in report.windows)


@pytest.fixture(scope="module")
def two_window_heat():
    spec = builtin_problem("cos", d=1, k=1, T=1.0)
    single = solve_full(spec, None, 20_000, 20, 3)
    double = solve_full(spec, certify(spec, force_delta=0.5), 20_000, 10, 3)
    return spec, single, double


def test_two_windows_agree_with_one(two_window_heat):
    _, (_, one), (_, two) = two_window_heat
    assert len(one.windows) == 1 and len(two.windows) == 2
    assert abs(one.y0[0] - two.y0[0]) <= 3 * math.hypot(one.y0_se, two.y0_se)
    assert two.oracle["within_3se"]


def test_handoff_is_bit_exact(two_window_heat):
    _, _, (pasted, _) = two_window_heat
    left, right = pasted.windows
    assert left.terminal.approx is right
    states = np.linspace(-2, 2, 41)[:, None]
    assert np.array_equal(left.y(left.steps, states), right.y(0, states))
    assert pasted.boundaries == [0.0, 0.5, 1.0]
    assert pasted.window_at(0.5) == (1, 0)
    assert pasted.window_at(1.0) == (1, 10)


def test_report_contents(two_window_heat):
    _, _, (_, report) = two_window_heat
    data = json.loads(report.to_json())
    assert data["seeds"] == {"master": 3, "window_streams": [0, 1]}
    assert data["best_effort"] is True  # the forced delta is not a certificate
    assert data["oracle"]["name"] == "heat_kernel"
    assert data["oracle_deviation_y0"] == data["oracle"]["deviation"]
    assert data["failing_window"] is None
    assert set(data["norms"]) >= {"bmo_sq", "bmo_se", "m2_sq", "m2_se"}
    lines = report.trace_csv().splitlines()
    assert lines[0] == "window,iter,dist_y,dist_z,ratio,clip_events"
    assert {line.split(",")[0] for line in lines[1:]} == {"0", "1"}


def test_report_is_deterministic():
    spec = builtin_problem("cos", GeneratorSpec("constant", c=(1.0,)), d=1, k=1, T=1.0)
    a = solve_full(spec, None, 3000, 10, 5)[1].to_json()
    b = solve_full(spec, None, 3000, 10, 5)[1].to_json()
    assert a == b


def test_certified_run_is_not_best_effort(tiny_tanh):
    led = certify(tiny_tanh)
    pasted, report = solve_full(tiny_tanh, led, 3000, 20, 1)
    assert led.existence_gate and not report.best_effort
    assert len(pasted.windows) == led.windows
    assert report.norms["tilde_R_check"]
    assert all(r["y_bmo_bound_check"] for w in report.windows for r in w.trace["records"])


def test_failing_window_is_recorded():
    spec = builtin_problem("cos", GeneratorSpec("tanh-of-Y", c=(1.0,)), d=1, k=1, T=1.0, C3=1.0)
    led = certify(spec, force_delta=0.5)
    pasted, report = solve_full(spec, led, 2000, 5, 0, max_iter=1, with_oracle=False)
    assert report.failing_window == 1 and not report.converged
    # the earlier window was still solved
    assert len(pasted.windows) == 2 and report.windows[0].verdict == "max_iter"
