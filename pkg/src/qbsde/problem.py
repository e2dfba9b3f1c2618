"""Problem instances: dimensions, bounded terminal values, product-generator drivers.

A problem is the BSDE ``dY = Z f(Y, Z) dt + Z dW`` on ``[0, T]`` with
``Y_T = xi(W_T)``.  Terminal maps and generators come from closed families so
that the declared constants ``C1..C4`` can be audited by sampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

TERMINAL_KINDS = (
    "constant",
    "cosine-of-first-coordinate",
    "sine-of-first-coordinate",
    "clipped-polynomial",
)
GENERATOR_KINDS = ("zero", "constant", "tanh-of-Y", "clipped-linear", "table")

# Relative slack for float rounding in the "declared constants dominate" checks.
_ROUNDING_SLACK = 64 * np.finfo(float).eps


class ConfigError(ValueError):
    """Malformed or inconsistent problem description."""


def clip_to_ball(x: np.ndarray, radius: float) -> np.ndarray:
    """Radially rescale rows of ``x`` (last axis) into the closed ball of ``radius``.

    Rows already inside are returned bit-for-bit, so the map is idempotent.  After
    rescaling, rows whose rounded norm still exceeds ``radius`` are shrunk by a few
    ulps until ``np.linalg.norm(row) <= radius`` holds exactly.
    """
    x = np.array(x, dtype=float, copy=True)
    if math.isinf(radius):
        return x
    norms = np.linalg.norm(x, axis=-1)
    over = norms > radius
    if not np.any(over):
        return x
    sub = x[over] * (radius / norms[over])[:, None]
    for _ in range(16):
        still = np.linalg.norm(sub, axis=-1) > radius
        if not np.any(still):
            break
        sub[still] *= 1.0 - 4.0 * np.finfo(float).eps
    x[over] = sub
    return x


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(f"non-finite {name} at index {tuple(int(i) for i in bad)}")


def _as_tuple(values: Any) -> tuple:
    if values is None:
        return None
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        return tuple(float(v) for v in arr)
    return tuple(tuple(float(v) for v in row) for row in arr)


# ---------------------------------------------------------------------------
# terminal values


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal value ``xi`` as a function of the terminal Brownian state.

    ``constant``: ``xi = value``.
    ``cosine-of-first-coordinate`` / ``sine-of-first-coordinate``:
    ``xi = (scale * cos(w_1), 0, ..., 0)`` (resp. ``sin``).
    ``clipped-polynomial``: component ``i`` is ``sum_j coefficients[i][j] * w_1**j``,
    then the vector is radially clipped to ``clip_radius``.

    Every kind is additionally clipped to the problem bound ``C1`` on evaluation.
    """

    kind: str
    value: tuple | None = None
    scale: float = 1.0
    coefficients: tuple | None = None
    clip_radius: float | None = None

    def __post_init__(self):
        if self.kind not in TERMINAL_KINDS:
            raise ConfigError(f"unknown terminal kind {self.kind!r}; expected one of {TERMINAL_KINDS}")
        if self.kind == "constant" and not self.value:
            raise ConfigError("terminal kind 'constant' needs field 'value'")
        if self.kind == "clipped-polynomial":
            if not self.coefficients:
                raise ConfigError("terminal kind 'clipped-polynomial' needs field 'coefficients'")
            if self.clip_radius is None or self.clip_radius < 0:
                raise ConfigError("terminal kind 'clipped-polynomial' needs a nonnegative 'clip_radius'")

    @property
    def output_dim(self) -> int | None:
        if self.kind == "constant":
            return len(self.value)
        if self.kind == "clipped-polynomial":
            return len(self.coefficients)
        return None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind == "constant":
            out["value"] = list(self.value)
        elif self.kind == "clipped-polynomial":
            out["coefficients"] = [list(r) for r in self.coefficients]
            out["clip_radius"] = self.clip_radius
        else:
            out["scale"] = self.scale
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TerminalSpec":
        if "kind" not in data:
            raise ConfigError("terminal: missing field 'kind'")
        kind = data["kind"]
        if kind == "clipped-polynomial":
            coeffs = data.get("coefficients")
            if coeffs is None:
                raise ConfigError("terminal: missing field 'coefficients'")
            coeffs = tuple(tuple(float(c) for c in row) for row in coeffs)
            return cls(kind, coefficients=coeffs, clip_radius=data.get("clip_radius"))
        if kind == "constant":
            if "value" not in data:
                raise ConfigError("terminal: missing field 'value'")
            return cls(kind, value=tuple(float(v) for v in data["value"]))
        return cls(kind, scale=float(data.get("scale", 1.0)))


def evaluate_terminal(
    spec: TerminalSpec, w_T: np.ndarray, d: int | None = None, bound: float = math.inf
) -> np.ndarray:
    """Map terminal Brownian states ``w_T[..., k]`` to ``xi[..., d]``, clipped to ``bound``."""
    w = np.asarray(w_T, dtype=float)
    _require_finite("terminal state", w)
    lead = w.shape[:-1]
    if d is None:
        d = spec.output_dim or 1
    if spec.kind == "constant":
        out = np.broadcast_to(np.asarray(spec.value, dtype=float), lead + (d,)).copy()
    elif spec.kind in ("cosine-of-first-coordinate", "sine-of-first-coordinate"):
        out = np.zeros(lead + (d,))
        trig = np.cos if spec.kind.startswith("cosine") else np.sin
        out[..., 0] = spec.scale * trig(w[..., 0])
    else:
        coeffs = np.asarray(spec.coefficients, dtype=float)
        powers = w[..., 0:1] ** np.arange(coeffs.shape[1])
        out = clip_to_ball(powers @ coeffs.T, spec.clip_radius)
    return clip_to_ball(out, bound)


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class GeneratorSpec:
    """The R^k-valued factor ``f(y, z)`` of the product driver ``z f(y, z)``.

    ``zero``: ``f = 0``.  ``constant``: ``f = c``.  ``tanh-of-Y``: ``f = c * tanh(y_1)``.
    ``clipped-linear``: ``f = clip(A y + B vec(z), clip_radius)`` with ``A`` of shape
    ``(k, d)`` and ``B`` of shape ``(k, d*k)`` acting on the row-major flattening of z.
    ``table``: user-supplied samples ``{"y", "z", "f"}``; accepted by
    :func:`validate_constants` only, never evaluated by the solvers.
    """

    kind: str
    c: tuple | None = None
    A: tuple | None = None
    B: tuple | None = None
    clip_radius: float = math.inf
    table: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}; expected one of {GENERATOR_KINDS}")
        if self.kind in ("constant", "tanh-of-Y") and not self.c:
            raise ConfigError(f"generator kind {self.kind!r} needs field 'c'")
        if self.kind == "clipped-linear" and (self.A is None or self.B is None):
            raise ConfigError("generator kind 'clipped-linear' needs fields 'A' and 'B'")
        if self.kind == "table" and not self.table:
            raise ConfigError("generator kind 'table' needs field 'samples'")

    @property
    def output_dim(self) -> int | None:
        if self.kind in ("constant", "tanh-of-Y"):
            return len(self.c)
        if self.kind == "clipped-linear":
            return len(self.A)
        return None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind in ("constant", "tanh-of-Y"):
            out["c"] = list(self.c)
        elif self.kind == "clipped-linear":
            out["A"] = [list(r) for r in self.A]
            out["B"] = [list(r) for r in self.B]
            out["clip_radius"] = None if math.isinf(self.clip_radius) else self.clip_radius
        elif self.kind == "table":
            out["samples"] = [dict(s) for s in self.table]
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GeneratorSpec":
        if "kind" not in data:
            raise ConfigError("generator: missing field 'kind'")
        kind = data["kind"]
        if kind in ("constant", "tanh-of-Y"):
            if "c" not in data:
                raise ConfigError("generator: missing field 'c'")
            return cls(kind, c=_as_tuple(data["c"]))
        if kind == "clipped-linear":
            for name in ("A", "B"):
                if name not in data:
                    raise ConfigError(f"generator: missing field {name!r}")
            radius = data.get("clip_radius")
            return cls(
                kind,
                A=_as_tuple(np.atleast_2d(data["A"])),
                B=_as_tuple(np.atleast_2d(data["B"])),
                clip_radius=math.inf if radius is None else float(radius),
            )
        if kind == "table":
            samples = tuple(
                {"y": list(map(float, s["y"])), "z": [list(map(float, r)) for r in s["z"]], "f": list(map(float, s["f"]))}
                for s in data.get("samples", ())
            )
            return cls(kind, table=samples)
        return cls(kind)


def evaluate_generator(spec: GeneratorSpec, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Evaluate ``f(y, z)`` for ``y[..., d]`` and ``z[..., d, k]``; returns ``[..., k]``."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    _require_finite("y", y)
    _require_finite("z", z)
    lead = y.shape[:-1]
    k = z.shape[-1]
    if spec.kind == "zero":
        return np.zeros(lead + (k,))
    if spec.kind == "constant":
        return np.broadcast_to(np.asarray(spec.c, dtype=float), lead + (k,)).copy()
    if spec.kind == "tanh-of-Y":
        return np.tanh(y[..., 0:1]) * np.asarray(spec.c, dtype=float)
    if spec.kind == "clipped-linear":
        A = np.asarray(spec.A, dtype=float)
        B = np.asarray(spec.B, dtype=float)
        zflat = z.reshape(lead + (z.shape[-2] * k,))
        return clip_to_ball(y @ A.T + zflat @ B.T, spec.clip_radius)
    raise ValueError("table generators are validate-only and cannot be evaluated by the solver")


def documented_constants(spec: GeneratorSpec) -> tuple[float, float, float]:
    """Smallest (C2, C3, C4) the built-in generator provably satisfies."""
    if spec.kind == "zero":
        return 0.0, 0.0, 0.0
    if spec.kind == "constant":
        return 0.0, 0.0, float(np.linalg.norm(spec.c))
    if spec.kind == "tanh-of-Y":
        # |tanh a - tanh b| <= |a - b| and |tanh a| <= |a|
        return float(np.linalg.norm(spec.c)), 0.0, 0.0
    if spec.kind == "clipped-linear":
        # radial clipping is the projection onto a convex set, hence 1-Lipschitz
        return (
            float(np.linalg.norm(np.asarray(spec.A), 2)),
            float(np.linalg.norm(np.asarray(spec.B), 2)),
            0.0,
        )
    raise ValueError("table generators have no documented constants")


# ---------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class ProblemSpec:
    d: int
    k: int
    T: float
    C1: float
    C2: float
    C3: float
    C4: float
    terminal: TerminalSpec
    generator: GeneratorSpec

    def __post_init__(self):
        if not (isinstance(self.d, int) and self.d >= 1):
            raise ConfigError(f"d must be a positive integer, got {self.d!r}")
        if not (isinstance(self.k, int) and self.k >= 1):
            raise ConfigError(f"k must be a positive integer, got {self.k!r}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError(f"T must be positive, got {self.T!r}")
        for name in ("C1", "C2", "C3", "C4"):
            val = getattr(self, name)
            if not (val >= 0 and math.isfinite(val)):
                raise ConfigError(f"{name} must be a nonnegative real, got {val!r}")
        td = self.terminal.output_dim
        if td is not None and td != self.d:
            raise ConfigError(f"terminal has output dimension {td}, problem has d={self.d}")
        gd = self.generator.output_dim
        if gd is not None and gd != self.k:
            raise ConfigError(f"generator has output dimension {gd}, problem has k={self.k}")
        if self.generator.kind == "clipped-linear":
            if np.shape(self.generator.A) != (self.k, self.d):
                raise ConfigError(f"generator A must have shape ({self.k}, {self.d})")
            if np.shape(self.generator.B) != (self.k, self.d * self.k):
                raise ConfigError(f"generator B must have shape ({self.k}, {self.d * self.k})")

    def xi(self, w_T: np.ndarray) -> np.ndarray:
        return evaluate_terminal(self.terminal, w_T, self.d, self.C1)

    def f(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return evaluate_generator(self.generator, y, z)

    def replace(self, **changes) -> "ProblemSpec":
        data = {name: getattr(self, name) for name in self.__dataclass_fields__}
        data.update(changes)
        return ProblemSpec(**data)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "k": self.k,
            "T": self.T,
            "C1": self.C1,
            "C2": self.C2,
            "C3": self.C3,
            "C4": self.C4,
            "terminal": self.terminal.to_dict(),
            "generator": self.generator.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProblemSpec":
        if not isinstance(data, Mapping):
            raise ConfigError("problem document must be a JSON object")
        for name in ("d", "k", "T", "C1", "C2", "C3", "C4", "terminal", "generator"):
            if name not in data:
                raise ConfigError(f"missing field {name!r}")
        try:
            d, k = data["d"], data["k"]
            if isinstance(d, float) and d.is_integer():
                d = int(d)
            if isinstance(k, float) and k.is_integer():
                k = int(k)
            return cls(
                d=d,
                k=k,
                T=float(data["T"]),
                C1=float(data["C1"]),
                C2=float(data["C2"]),
                C3=float(data["C3"]),
                C4=float(data["C4"]),
                terminal=TerminalSpec.from_dict(data["terminal"]),
                generator=GeneratorSpec.from_dict(data["generator"]),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed problem document: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ProblemSpec":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read problem config {path}: {exc}") from exc
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# empirical validation of the declared constants


@dataclass
class ValidationReport:
    n_samples: int
    seed: int
    max_lipschitz_ratio: float
    max_growth_excess: float
    lipschitz_ok: bool
    growth_ok: bool
    lipschitz_witness: dict | None = None
    growth_witness: dict | None = None

    @property
    def passed(self) -> bool:
        return self.lipschitz_ok and self.growth_ok


def _sample_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * radius * rng.random((n, 1)) ** (1.0 / dim)


def _lipschitz_ratio(df, dy, dz, C2, C3):
    num = np.linalg.norm(df, axis=-1)
    den = C2 * np.linalg.norm(dy, axis=-1) + C3 * np.linalg.norm(dz, axis=(-2, -1))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(num == 0.0, 0.0, num / den)
    return ratio


def validate_constants(spec: ProblemSpec, n_samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Check the declared C2, C3, C4 against sampled generator evaluations.

    ``y`` is drawn uniformly from the ball of radius ``2 C1`` and ``z`` has standard
    normal entries.  Half of the Lipschitz pairs are independent, half are local
    perturbations (which expose the maximal slope).  A generator of kind ``table`` is
    checked on its own samples instead.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    C2, C3, C4 = spec.C2, spec.C3, spec.C4
    gen = spec.generator
    if gen.kind == "table":
        ys = np.array([s["y"] for s in gen.table], dtype=float)
        zs = np.array([s["z"] for s in gen.table], dtype=float)
        fs = np.array([s["f"] for s in gen.table], dtype=float)
        m = min(len(ys), 2000)
        i, j = np.triu_indices(m, k=1)
        y1, z1, f1, y2, z2, f2 = ys[i], zs[i], fs[i], ys[j], zs[j], fs[j]
        yg, zg, fg = ys, zs, fs
    else:
        rng = np.random.default_rng(seed)
        radius = 2.0 * spec.C1 if spec.C1 > 0 else 1.0
        n = int(n_samples)
        y1 = _sample_ball(rng, n, spec.d, radius)
        z1 = rng.standard_normal((n, spec.d, spec.k))
        y2 = _sample_ball(rng, n, spec.d, radius)
        z2 = rng.standard_normal((n, spec.d, spec.k))
        half = n // 2
        eps = 1e-3 * radius
        y2[:half] = y1[:half] + eps * rng.standard_normal((half, spec.d))
        z2[:half] = z1[:half] + 1e-3 * rng.standard_normal((half, spec.d, spec.k))
        f1 = spec.f(y1, z1)
        f2 = spec.f(y2, z2)
        yg, zg, fg = y1, z1, f1

    ratio = _lipschitz_ratio(f1 - f2, y1 - y2, z1 - z2, C2, C3)
    i_lip = int(np.argmax(ratio)) if ratio.size else 0
    max_ratio = float(ratio[i_lip]) if ratio.size else 0.0

    bound = C2 * np.linalg.norm(yg, axis=-1) + C3 * np.linalg.norm(zg.reshape(len(zg), -1), axis=-1) + C4
    fnorm = np.linalg.norm(fg, axis=-1)
    excess = fnorm - bound
    i_gr = int(np.argmax(excess))
    max_excess = float(excess[i_gr])

    return ValidationReport(
        n_samples=int(len(ratio)),
        seed=seed,
        max_lipschitz_ratio=max_ratio,
        max_growth_excess=max_excess,
        lipschitz_ok=bool(max_ratio <= 1.0 + _ROUNDING_SLACK),
        growth_ok=bool(max_excess <= _ROUNDING_SLACK * max(1.0, float(bound[i_gr]))),
        lipschitz_witness={
            "y1": y1[i_lip].tolist(),
            "z1": z1[i_lip].tolist(),
            "y2": y2[i_lip].tolist(),
            "z2": z2[i_lip].tolist(),
            "ratio": max_ratio,
        }
        if ratio.size
        else None,
        growth_witness={"y": yg[i_gr].tolist(), "z": zg[i_gr].tolist(), "excess": max_excess},
    )


def builtin_problem(
    terminal: TerminalSpec | Sequence | str,
    generator: GeneratorSpec | Mapping[str, Any] | None = None,
    *,
    d: int = 1,
    k: int = 1,
    T: float = 1.0,
    C1: float | None = None,
    C3: float | None = None,
) -> ProblemSpec:
    """Convenience constructor with the generator's documented constants.

    ``terminal`` may be a TerminalSpec, ``"cos"``/``"sin"`` (unit scale), or a
    sequence taken as a constant terminal value.  ``C1`` defaults to the smallest
    bound the terminal satisfies; ``C3`` may be raised above its documented value.
    """
    if isinstance(terminal, str):
        kind = {"cos": "cosine-of-first-coordinate", "sin": "sine-of-first-coordinate"}[terminal]
        terminal = TerminalSpec(kind, scale=1.0)
    elif not isinstance(terminal, TerminalSpec):
        terminal = TerminalSpec("constant", value=tuple(float(v) for v in terminal))
    if isinstance(generator, Mapping):
        generator = GeneratorSpec.from_dict(generator)
    generator = generator or GeneratorSpec("zero")
    if C1 is None:
        if terminal.kind == "constant":
            C1 = float(np.linalg.norm(terminal.value))
        elif terminal.kind == "clipped-polynomial":
            C1 = float(terminal.clip_radius)
        else:
            C1 = abs(terminal.scale)
    C2, C3_doc, C4 = documented_constants(generator)
    return ProblemSpec(
        d=d,
        k=k,
        T=T,
        C1=C1,
        C2=C2,
        C3=C3_doc if C3 is None else max(C3, C3_doc),
        C4=C4,
        terminal=terminal,
        generator=generator,
    )
