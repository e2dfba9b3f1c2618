from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbsde.paths import (
    EnsembleTooLarge,
    PathEnsemble,
    TimeGrid,
    conditional_log_weights,
    counter_normals,
    generate_ensemble,
    integrate,
    stochastic_exponential_weights,
)


def test_grid():
    g = TimeGrid(0.5, 1.0, 4)
    assert g.dt == 0.125
    assert g.times[0] == 0.5 and g.times[-1] == 1.0 and len(g.times) == 5
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300), st.integers(1, 5), st.integers(1, 3), st.integers(1, 97))
def test_chunking_does_not_change_draws(n, steps, k, chunk):
    grid = TimeGrid(0.0, 1.0, steps)
    a = generate_ensemble(grid, n, k, 3)
    b = generate_ensemble(grid, n, k, 3, chunk_paths=chunk)
    assert np.array_equal(a.increments, b.increments)


def test_counter_offsets_agree():
    key = np.random.SeedSequence([1, 0, 0]).generate_state(2, np.uint64)
    full = counter_normals(key, 0, 20)
    for start in (0, 1, 3, 5, 7):
        assert np.array_equal(counter_normals(key, start, 20 - start), full[start:])


def test_streams_and_seeds_differ():
    grid = TimeGrid(0.0, 1.0, 3)
    a = generate_ensemble(grid, 50, 1, 1).increments
    assert not np.array_equal(a, generate_ensemble(grid, 50, 1, 2).increments)
    assert not np.array_equal(a, generate_ensemble(grid, 50, 1, 1, stream=1).increments)


def test_moments():
    ens = generate_ensemble(TimeGrid(0.0, 1.0, 10), 100_000, 2, 0)
    z = ens.increments / math.sqrt(0.1)
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * math.sqrt(2 / z.size)
    assert abs(np.corrcoef(z[:, 0, 0], z[:, 0, 1])[0, 1]) < 4 / math.sqrt(len(z))


def test_states_and_late_start():
    ens = generate_ensemble(TimeGrid(0.25, 1.0, 3), 50_000, 1, 4)
    states = ens.states
    assert states.shape == (50_000, 4, 1)
    assert np.allclose(np.diff(states, axis=1), ens.increments)
    assert abs(states[:, 0, 0].var() - 0.25) < 0.01
    assert abs(ens.terminal_states.var() - 1.0) < 0.03
    fixed = generate_ensemble(TimeGrid(0.25, 1.0, 3), 10, 2, 4, initial=[1.0, -1.0])
    assert np.all(fixed.states[:, 0] == [1.0, -1.0])


def test_dump_load_round_trip(tmp_path):
    grid = TimeGrid(0.0, 1.0, 6)
    ens = generate_ensemble(grid, 17, 2, 8)
    path = tmp_path / "ens.bin"
    ens.dump(path)
    assert path.stat().st_size == 6 + 3 * 8 + 8 + 17 * 6 * 2 * 8
    back = PathEnsemble.load(path, grid)
    assert np.array_equal(back.increments, ens.increments)
    assert back.seed == 8 and back.n_paths == 17
    with pytest.raises(ValueError, match="steps"):
        PathEnsemble.load(path, TimeGrid(0.0, 1.0, 5))


def test_memory_guard():
    with pytest.raises(EnsembleTooLarge, match="GiB"):
        generate_ensemble(TimeGrid(0.0, 1.0, 1000), 10**6, 3, 0)


def test_weights_are_stochastic_exponential():
    ens = generate_ensemble(TimeGrid(0.0, 1.0, 20), 10_000, 1, 2)
    f = np.full((10_000, 20, 1), 0.7)
    w, clips = stochastic_exponential_weights(ens, f)
    expected = np.exp(-0.7 * ens.terminal_states[:, 0] - 0.5 * 0.49)
    assert np.allclose(w, expected)
    assert clips == 0
    se = w.std() / math.sqrt(len(w))
    assert abs(w.mean() - 1) <= 3 * se


def test_conditional_weights_and_clipping():
    inc = np.array([[[1.0], [2.0]]])
    L, clips = conditional_log_weights(inc, np.ones_like(inc), 0.5)
    assert np.allclose(L, [[-3.0 - 0.5, -2.0 - 0.25, 0.0]])
    assert clips == 0
    L, clips = conditional_log_weights(inc * 100, np.ones_like(inc), 0.5)
    assert clips == 2 and L.min() == -30.0
    with pytest.raises(ValueError):
        conditional_log_weights(inc, np.ones((1, 3, 1)), 0.5)
    with pytest.raises(ValueError):
        conditional_log_weights(inc, np.full_like(inc, np.nan), 0.5)


def test_integrate():
    ens = generate_ensemble(TimeGrid(0.0, 1.0, 4), 5, 2, 0)
    z = np.ones((5, 4, 3, 2))
    ito, quad = integrate(ens, z)
    assert ito.shape == (5, 3)
    assert np.allclose(ito[:, 0], ens.terminal_states.sum(axis=1))
    assert np.allclose(quad, 6.0)
    with pytest.raises(ValueError):
        integrate(ens, np.ones((5, 3, 2)))
