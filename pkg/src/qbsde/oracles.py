"""Reference solutions for one-dimensional problems: closed forms and a binomial tree.

All oracles use the solver's convention ``dY = Z f(Y, Z) dt + Z dW``, so one
backward step reads ``y_t = E[y_{t+dt}] - dt z f(y_t, z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .problem import ProblemSpec

TREE_DAMPING = 0.5
TREE_MAX_INNER = 50
TREE_TOL = 1e-12
DEFAULT_TREE_STEPS = 2000


class TreeConvergenceError(ArithmeticError):
    def __init__(self, level: int, node: int, residual: float):
        super().__init__(f"tree fixed point did not converge at level {level}, node {node} (residual {residual:.3e})")
        self.level = level
        self.node = node


def _closed_form(t: float, w: float, T: float, shift: float, kind: str, scale: float) -> tuple[float, float]:
    decay = math.exp(-(T - t) / 2)
    x = w - shift
    if kind == "cos":
        return scale * decay * math.cos(x), -scale * decay * math.sin(x)
    if kind == "sin":
        return scale * decay * math.sin(x), scale * decay * math.cos(x)
    raise ValueError(f"kind must be 'cos' or 'sin', got {kind!r}")


def heat_kernel_oracle(t: float, w: float, T: float, kind: str = "cos", scale: float = 1.0) -> tuple[float, float]:
    """``(Y, Z)`` at ``(t, w)`` for ``f = 0`` and ``xi = scale * cos(W_T)`` (or ``sin``)."""
    return _closed_form(t, w, T, 0.0, kind, scale)


def constant_drift_oracle(
    t: float, w: float, T: float, c: float, kind: str = "cos", scale: float = 1.0
) -> tuple[float, float]:
    """``(Y, Z)`` for ``f = c``: under Q the state is ``W^Q - c t``, so the argument shifts by ``c (T - t)``."""
    return _closed_form(t, w, T, c * (T - t), kind, scale)


@dataclass
class TreeResult:
    y0: float
    z0: float
    n_steps: int
    max_inner: int
    lattice_y: list[np.ndarray] | None = None
    lattice_z: list[np.ndarray] | None = None


def tree_oracle(spec: ProblemSpec, n_steps: int, keep_lattice: bool = False) -> TreeResult:
    """Backward induction on the recombining ``+-sqrt(dt)`` lattice.

    Node ``j`` at level ``i`` sits at ``w = (2j - i) sqrt(dt)``.  The implicit
    equation in ``y`` is solved by damped fixed-point iteration, vectorised over the
    nodes of a level.
    """
    if spec.d != 1 or spec.k != 1:
        raise ValueError("the tree oracle handles d = k = 1 only")
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    dt = spec.T / n_steps
    sq = math.sqrt(dt)
    w = (2 * np.arange(n_steps + 1) - n_steps) * sq
    y = spec.xi(w[:, None])[:, 0]
    ys, zs = ([y], []) if keep_lattice else (None, None)
    worst = 0
    z = np.zeros(1)
    for level in range(n_steps - 1, -1, -1):
        up, down = y[1:], y[:-1]
        mean = 0.5 * (up + down)
        z = (up - down) / (2 * sq)
        z_mat = z[:, None, None]
        cur = mean.copy()
        for inner in range(1, TREE_MAX_INNER + 1):
            f = spec.f(cur[:, None], z_mat)[:, 0]
            update = mean - dt * z * f
            residual = np.abs(update - cur)
            if np.max(residual, initial=0.0) <= TREE_TOL:
                cur = update
                break
            cur = (1 - TREE_DAMPING) * cur + TREE_DAMPING * update
        else:
            node = int(np.argmax(residual))
            raise TreeConvergenceError(level, node, float(residual[node]))
        worst = max(worst, inner)
        y = cur
        if keep_lattice:
            ys.append(y)
            zs.append(z)
    if keep_lattice:
        ys.reverse()
        zs.reverse()
    return TreeResult(float(y[0]), float(z[0]), n_steps, worst, ys, zs)


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class OracleValue:
    name: str
    y0: float
    z0: float | None


def _trig_terminal(spec: ProblemSpec) -> tuple[str, float] | None:
    term = spec.terminal
    if spec.d != 1 or spec.k != 1 or spec.T <= 0:
        return None
    if term.kind in ("cosine-of-first-coordinate", "sine-of-first-coordinate") and abs(term.scale) <= spec.C1:
        return ("cos" if term.kind.startswith("cosine") else "sin"), term.scale
    return None


def _heat(spec: ProblemSpec) -> OracleValue | None:
    trig = _trig_terminal(spec)
    if trig is None or spec.generator.kind != "zero":
        return None
    y, z = heat_kernel_oracle(0.0, 0.0, spec.T, *trig)
    return OracleValue("heat_kernel", y, z)


def _drift(spec: ProblemSpec) -> OracleValue | None:
    trig = _trig_terminal(spec)
    if trig is None or spec.generator.kind != "constant":
        return None
    y, z = constant_drift_oracle(0.0, 0.0, spec.T, float(spec.generator.c[0]), *trig)
    return OracleValue("constant_drift", y, z)


def _tree(spec: ProblemSpec) -> OracleValue | None:
    if spec.d != 1 or spec.k != 1 or spec.generator.kind == "table":
        return None
    res = tree_oracle(spec, DEFAULT_TREE_STEPS)
    return OracleValue("tree", res.y0, res.z0)


ORACLES: dict[str, Callable[[ProblemSpec], OracleValue | None]] = {
    "heat_kernel": _heat,
    "constant_drift": _drift,
    "tree": _tree,
}


def reference_value(spec: ProblemSpec) -> OracleValue | None:
    """First registered oracle that applies to ``spec``; ``None`` if none does."""
    for oracle in ORACLES.values():
        value = oracle(spec)
        if value is not None:
            return value
    return None
