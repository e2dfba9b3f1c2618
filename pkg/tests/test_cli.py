from __future__ import annotations

import io
import json
import shutil

import pytest

from qbsde.cli import EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_OK, EXIT_UNCERTIFIED, apply_overrides, main
from qbsde.problem import ConfigError


def run(*argv):
    out = io.StringIO()
    code = main(list(map(str, argv)), out)
    return code, out.getvalue()


@pytest.fixture
def configs(tmp_path, config_dir):
    for path in config_dir.glob("*.json"):
        shutil.copy(path, tmp_path / path.name)
    return tmp_path


def test_certify_theorem_grade(configs):
    code, text = run("certify", configs / "theorem_grade.json")
    data = json.loads(text)
    assert code == EXIT_OK
    assert data["existence_gate"] and data["binding_term"] == "2C3sqrt(R)"
    assert data["binding_value"] == pytest.approx(0.0998752, rel=1e-6)


def test_certify_uncertified_exits_3(configs):
    code, text = run("certify", configs / "ledger_example.json")
    data = json.loads(text)
    assert code == EXIT_UNCERTIFIED
    assert data["prop_gate"] and not data["existence_gate"]


def test_missing_constant_is_a_config_error(configs, caplog):
    path = configs / "heat_kernel.json"
    data = json.loads(path.read_text())
    del data["C3"]
    path.write_text(json.dumps(data))
    code, _ = run("certify", path)
    assert code == EXIT_CONFIG
    assert "C3" in caplog.text


def test_unreadable_config(tmp_path):
    assert run("certify", tmp_path / "missing.json")[0] == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert run("certify", bad)[0] == EXIT_CONFIG


def test_overrides():
    data = {"C1": 1.0, "terminal": {"scale": 1.0}}
    out = apply_overrides(data, ["C1=0.5", "terminal.scale=0.25", "terminal.kind=constant"])
    assert out == {"C1": 0.5, "terminal": {"scale": 0.25, "kind": "constant"}}
    assert data["C1"] == 1.0
    with pytest.raises(ConfigError):
        apply_overrides(data, ["C1"])
    with pytest.raises(ConfigError):
        apply_overrides(data, ["C1.x=1"])


def test_solve_constant_terminal(configs):
    path = configs / "constant_terminal.json"
    code, text = run("solve", path, "--paths", 2000, "--steps", 5)
    report = json.loads(text)
    assert code == EXIT_OK
    assert report["y0"] == [0.3, 0.4]
    assert report["windows"][0]["trace"]["records"][0]["dist_y"] == 0.0
    trace = (configs / "constant_terminal.trace.csv").read_text().splitlines()
    assert trace[0] == "window,iter,dist_y,dist_z,ratio,clip_events" and len(trace) == 2


def test_solve_is_reproducible(configs):
    args = ("solve", configs / "constant_drift.json", "--paths", 2000, "--steps", 10, "--seed", 4)
    first, second = run(*args), run(*args)
    assert first[0] == EXIT_OK and first[1] == second[1]
    assert run(*args[:-1], 5)[1] != first[1]


def test_solve_nonconvergence_exits_4(configs):
    code, text = run("solve", configs / "tanh.json", "--paths", 1000, "--steps", 5, "--set", "C1=1.0")
    assert code == EXIT_OK
    # a driver far outside the contraction regime
    code, _ = run(
        "solve", configs / "tanh.json", "--paths", 1000, "--steps", 5,
        "--set", 'generator={"kind": "clipped-linear", "A": [[0.0]], "B": [[40.0]], "clip_radius": 40.0}',
        "--set", "C3=40.0",
    )
    assert code == EXIT_NONCONVERGED


def test_solve_rejects_bad_flags(configs):
    assert run("solve", configs / "heat_kernel.json", "--paths", 0)[0] == EXIT_CONFIG
    assert run("solve", configs / "heat_kernel.json", "--force-delta", 2.0)[0] == EXIT_CONFIG


def test_validate_invariants():
    code, text = run("validate", "--suite", "invariants")
    assert code == EXIT_OK
    lines = text.splitlines()
    assert lines[-1] == "all cases passed"
    assert all(line.startswith("PASS") for line in lines[:-1])


def test_validate_zero_tolerance_fails():
    code, text = run("validate", "--suite", "oracles", "--tol-multiplier", 0)
    assert code == EXIT_NONCONVERGED
    assert "FAIL" in text


def test_contraction(configs):
    code, text = run("contraction", configs / "ledger_example.json")
    assert code == EXIT_UNCERTIFIED and json.loads(text)["probes"] == []
    code, text = run("contraction", configs / "tiny_tanh.json", "--trials", 2, "--paths", 1000, "--steps", 5)
    data = json.loads(text)
    assert code == EXIT_OK and data["within_bound"]
    assert [r["trial"] for r in data["probes"]] == [0, 1, "identical"]
    assert data["probes"][-1]["ratio"] == 0.0


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert "qbsde" in capsys.readouterr().out
