"""Brownian ensembles, Ito/Lebesgue sums and discrete stochastic exponentials.

Gaussian draws come from a counter-based generator: the normal for cell
``(path, step, component)`` is the inverse-CDF image of raw Philox output number
``(path * steps + step) * k + component`` under a key derived from
``(seed, stream)``.  Any chunking of the work therefore yields the same tensor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import ndtri

LOG_WEIGHT_CLIP = 30.0
MEMORY_LIMIT_BYTES = 4 * 2**30
DUMP_MAGIC = b"QBSDE1"
_HEADER = struct.Struct("<6sQQQq")


class EnsembleTooLarge(MemoryError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ValueError(f"time grid needs t0 < t1, got [{self.t0}, {self.t1}]")
        if self.steps < 1:
            raise ValueError("time grid needs at least one step")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + (self.t1 - self.t0) * np.arange(self.steps + 1) / self.steps
        t[-1] = self.t1
        return t


def _key(seed: int, *tags: int) -> np.ndarray:
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    return np.random.SeedSequence([seed, *tags]).generate_state(2, np.uint64)


def counter_normals(key: np.ndarray, start: int, count: int) -> np.ndarray:
    """Standard normals number ``start .. start+count-1`` of the keyed stream."""
    block, offset = divmod(start, 4)
    bits = np.random.Philox(key=key, counter=block)
    raw = bits.random_raw(count + offset)[offset:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True)
class PathEnsemble:
    grid: TimeGrid
    n_paths: int
    k: int
    increments: np.ndarray = field(repr=False)
    initial: np.ndarray = field(repr=False)
    seed: int = 0
    stream: int = 0

    @cached_property
    def states(self) -> np.ndarray:
        """Brownian values ``W`` at every grid time, shape ``[n_paths, steps + 1, k]``."""
        w = np.empty((self.n_paths, self.grid.steps + 1, self.k))
        w[:, 0] = self.initial
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        w[:, 1:] += self.initial[:, None, :]
        return w

    @property
    def terminal_states(self) -> np.ndarray:
        return self.states[:, -1]

    def dump(self, path: str | Path) -> None:
        """Write the flat binary layout: header ``<6sQQQq`` then increments (float64, LE, C order)."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(DUMP_MAGIC, self.n_paths, self.grid.steps, self.k, self.seed))
            fh.write(np.ascontiguousarray(self.increments, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, grid: TimeGrid, initial: np.ndarray | None = None) -> "PathEnsemble":
        data = Path(path).read_bytes()
        magic, n, steps, k, seed = _HEADER.unpack_from(data)
        if magic != DUMP_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if steps != grid.steps:
            raise ValueError(f"{path}: file has {steps} steps, grid has {grid.steps}")
        inc = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n, steps, k).astype(float)
        init = np.zeros((n, k)) if initial is None else np.asarray(initial, dtype=float)
        return cls(grid, n, k, inc, init, seed)


def generate_ensemble(
    grid: TimeGrid,
    n_paths: int,
    k: int,
    seed: int,
    *,
    stream: int = 0,
    initial: np.ndarray | None = None,
    chunk_paths: int = 16384,
    memory_limit: int = MEMORY_LIMIT_BYTES,
) -> PathEnsemble:
    """Draw ``n_paths`` Brownian paths on ``grid``.

    When ``initial`` is omitted and ``grid.t0 > 0``, the starting values are drawn
    from ``N(0, t0 I)`` so that the states at every grid time have the law of the
    Brownian motion started at 0 at time 0.
    """
    if n_paths < 1 or k < 1:
        raise ValueError("n_paths and k must be positive")
    # increments plus the cached state tensor
    need = 8 * n_paths * k * (2 * grid.steps + 2)
    if need > memory_limit:
        raise EnsembleTooLarge(
            f"ensemble of {n_paths} paths x {grid.steps} steps x {k} needs {need / 2**30:.2f} GiB "
            f"(limit {memory_limit / 2**30:.2f} GiB)"
        )
    key = _key(seed, stream, 0)
    per_path = grid.steps * k
    inc = np.empty((n_paths, grid.steps, k))
    sd = np.sqrt(grid.dt)
    for lo in range(0, n_paths, chunk_paths):
        hi = min(lo + chunk_paths, n_paths)
        z = counter_normals(key, lo * per_path, (hi - lo) * per_path)
        inc[lo:hi] = z.reshape(hi - lo, grid.steps, k) * sd
    if initial is None:
        if grid.t0 > 0:
            initial = counter_normals(_key(seed, stream, 1), 0, n_paths * k).reshape(n_paths, k) * np.sqrt(grid.t0)
        else:
            initial = np.zeros((n_paths, k))
    else:
        initial = np.broadcast_to(np.asarray(initial, dtype=float), (n_paths, k)).copy()
    return PathEnsemble(grid, n_paths, k, inc, initial, seed, stream)


def conditional_log_weights(
    increments: np.ndarray, f_values: np.ndarray, dt: float, clip: float = LOG_WEIGHT_CLIP
) -> tuple[np.ndarray, int]:
    """Log-density of the measure change from each grid time to the end.

    Returns ``L`` of shape ``[n_paths, steps + 1]`` with
    ``L[:, i] = sum_{j >= i} (-f_j . dW_j - |f_j|^2 dt / 2)`` (so ``L[:, -1] = 0``),
    clipped to ``[-clip, clip]``, and the number of clipped entries.
    """
    f_values = np.asarray(f_values, dtype=float)
    if f_values.shape != increments.shape:
        raise ValueError(f"f_values shape {f_values.shape} != increments shape {increments.shape}")
    if not np.all(np.isfinite(f_values)):
        raise ValueError("f_values must be finite")
    step = -np.einsum("nsk,nsk->ns", f_values, increments) - 0.5 * dt * np.einsum("nsk,nsk->ns", f_values, f_values)
    L = np.zeros((step.shape[0], step.shape[1] + 1))
    L[:, :-1] = np.cumsum(step[:, ::-1], axis=1)[:, ::-1]
    clipped = int(np.count_nonzero(np.abs(L) > clip))
    if clipped:
        np.clip(L, -clip, clip, out=L)
    return L, clipped


def stochastic_exponential_weights(ensemble: PathEnsemble, f_values: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-path density ``exp(-sum f.dW - sum |f|^2 dt / 2)`` over the whole grid.

    ``f_values[n, s, :]`` must be the driver at the left endpoint of step ``s``.
    Returns ``(weights, clip_events)``; log-weights are clipped to +-30.
    """
    L, clipped = conditional_log_weights(ensemble.increments, f_values, ensemble.grid.dt)
    return np.exp(L[:, 0]), clipped


def integrate(ensemble: PathEnsemble, integrand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left-point sums ``sum_s z_s dW_s`` and ``sum_s |z_s|^2 dt`` per path.

    ``integrand`` has shape ``[n_paths, steps, ..., k]``; the Ito sum contracts the
    trailing axis against the increments.
    """
    z = np.asarray(integrand, dtype=float)
    if z.shape[:2] != ensemble.increments.shape[:2] or z.shape[-1] != ensemble.k:
        raise ValueError(
            f"integrand shape {z.shape} incompatible with increments {ensemble.increments.shape}"
        )
    ito = np.einsum("ns...k,nsk->n...", z, ensemble.increments)
    quad = (z * z).reshape(z.shape[0], -1).sum(axis=1) * ensemble.grid.dt
    return ito, quad
