from __future__ import annotations

import math
from pathlib import Path

import pytest

from qbsde.problem import GeneratorSpec, TerminalSpec, builtin_problem

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def heat():
    return builtin_problem("cos", d=1, k=1, T=1.0)


@pytest.fixture
def drift():
    return builtin_problem("cos", GeneratorSpec("constant", c=(1.0,)), d=1, k=1, T=1.0)


@pytest.fixture
def tanh_problem():
    return builtin_problem("cos", GeneratorSpec("tanh-of-Y", c=(1.0,)), d=1, k=1, T=1.0, C3=1.0)


@pytest.fixture
def tiny_tanh():
    """Certifiable: terminal scale and bound e^-380, tanh driver."""
    C1 = math.exp(-380.0)
    return builtin_problem(
        TerminalSpec("cosine-of-first-coordinate", scale=C1),
        GeneratorSpec("tanh-of-Y", c=(1.0,)),
        d=1,
        k=1,
        T=1.0,
        C1=C1,
        C3=1.0,
    )


@pytest.fixture(scope="session")
def config_dir():
    return CONFIGS
