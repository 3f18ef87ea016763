from __future__ import annotations

import numpy as np
import pytest
from conftest import FRAME

from photostep_core.exceptions import ValidationError
from photostep_core.model import Trace
from photostep_core.proposal import (
    UNIFORM_FLOOR_MASS,
    build_proposal,
    pmf_at,
    sample_location,
    window_edges,
    window_zscores,
)


def test_grid_covers_interior_frame_boundaries(step_trace, dist):
    assert dist.size == step_trace.N - 1
    np.testing.assert_allclose(dist.grid, FRAME * np.arange(1, step_trace.N))
    assert dist.pmf.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(dist.pmf > 0)


def test_every_point_keeps_the_uniform_floor(dist):
    assert dist.pmf.min() >= UNIFORM_FLOOR_MASS / dist.size * (1 - 1e-12)


def test_constant_trace_gets_uniform_proposal():
    trace = Trace.from_intensities(np.full(40, 5.0), frame_width=FRAME)
    dist = build_proposal(trace)
    np.testing.assert_allclose(dist.pmf, 1.0 / dist.size)


def test_mass_concentrates_at_steps(dist):
    # grid index 19 is the boundary after frame 19, where the first step sits
    assert dist.pmf[19] > 3 * dist.pmf[9]
    assert dist.pmf[39] > 3 * dist.pmf[49]


def test_zscores_are_scale_free(step_trace):
    scaled = Trace.from_intensities(step_trace.intensities * 7.0, frame_width=FRAME)
    _, z = window_zscores(step_trace, 10)
    _, z_scaled = window_zscores(scaled, 10)
    np.testing.assert_allclose(z, z_scaled, rtol=1e-10)


def test_window_edges_merge_a_trailing_single_frame():
    assert window_edges(21, 10).tolist() == [0, 10, 21]
    assert window_edges(25, 10).tolist() == [0, 10, 20, 25]


def test_index_lookup_round_trips_grid_times(dist):
    for i in (0, 5, dist.size - 1):
        assert dist.index_of(float(dist.grid[i])) == i
    assert pmf_at(dist, float(dist.grid[5])) == pytest.approx(dist.pmf[5])
    with pytest.raises(ValidationError):
        dist.index_of(0.0)


def test_restricted_sampling_stays_in_range(dist, rng):
    draws = [dist.sample_index(rng, 10, 15) for _ in range(500)]
    assert min(draws) >= 10
    assert max(draws) < 15
    with pytest.raises(ValidationError):
        dist.sample_index(rng, 5, 5)


def test_sampling_follows_the_pmf(dist, rng):
    draws = np.array([dist.sample_index(rng) for _ in range(20_000)])
    freq = np.bincount(draws, minlength=dist.size) / draws.size
    assert np.abs(freq - dist.pmf).max() < 0.02
    assert 0 < sample_location(dist, rng) < dist.L


def test_mass_is_sum_of_pmf(dist):
    assert dist.mass(3, 17) == pytest.approx(dist.pmf[3:17].sum(), rel=1e-12)


def test_invalid_settings(step_trace):
    with pytest.raises(ValidationError):
        build_proposal(step_trace, window_size=1)
    with pytest.raises(ValidationError):
        build_proposal(step_trace, base_variance=0.0)
    with pytest.raises(ValidationError):
        build_proposal(step_trace, resolution=step_trace.L)


def test_coarser_resolution_shrinks_the_grid(step_trace):
    dist = build_proposal(step_trace, resolution=2 * FRAME)
    assert dist.size == 29
    assert dist.pmf.sum() == pytest.approx(1.0)
