from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import FRAME, make_step_trace
from scipy import integrate, stats

from photostep_core.exceptions import (
    DegenerateConfigurationError,
    InvalidConfigurationError,
    PhotostepError,
    ValidationError,
)
from photostep_core.model import (
    ChangePointState,
    IntensityParams,
    Trace,
    dwelling_bounds,
    fit_dwelling_counts,
    frame_counts,
    log_k_prior,
    log_kt_prior,
    log_likelihood,
    log_location_prior,
    log_param_prior,
)


# --- Domain types ---


def test_error_hierarchy():
    names = {cls.__name__ for cls in PhotostepError.__subclasses__()}
    assert names == {
        "ConfigError",
        "ValidationError",
        "DegenerateConfigurationError",
        "InvalidConfigurationError",
        "ConvergenceError",
        "TraceFormatError",
    }


def test_trace_from_intensities_uses_frame_midpoints():
    trace = Trace.from_intensities([1.0, 2.0, 3.0], frame_width=FRAME)
    np.testing.assert_allclose(trace.times, [0.5 * FRAME, 1.5 * FRAME, 2.5 * FRAME])
    assert trace.L == pytest.approx(3 * FRAME)
    assert trace.N == 3
    assert trace.frame_width == pytest.approx(FRAME)


def test_trace_rejects_mismatched_lengths():
    with pytest.raises(ValidationError):
        Trace(times=np.array([1.0, 2.0]), intensities=np.array([1.0]), L=3.0)


def test_trace_rejects_non_increasing_times():
    with pytest.raises(ValidationError):
        Trace(times=np.array([1.0, 1.0, 2.0]), intensities=np.zeros(3), L=3.0)


def test_state_rejects_equal_adjacent_counts():
    with pytest.raises(ValidationError):
        ChangePointState(s=(0.0, 0.5, 1.0), n=(1, 1))


def test_state_rejects_odd_kt():
    with pytest.raises(ValidationError):
        ChangePointState(s=(0.0, 0.5, 1.0), n=(1, 0), k_t=1, short_flags=(True,))


def test_state_defaults_to_no_short_flags():
    state = ChangePointState(s=(0.0, 0.3, 0.6, 1.0), n=(2, 1, 0))
    assert state.k == 2
    assert state.short_flags == (False, False)
    assert state.interior == (0.3, 0.6)


def test_params_require_positive_mu_f_and_variances():
    with pytest.raises(ValidationError):
        IntensityParams(mu_f=0.0, mu_b=0.0, sigma_f2=1.0, sigma_b2=1.0)
    with pytest.raises(ValidationError):
        IntensityParams(mu_f=1.0, mu_b=0.0, sigma_f2=1.0, sigma_b2=0.0)


# --- Likelihood ---


def test_dwelling_bounds_assign_frames_by_midpoint(step_trace):
    bounds = dwelling_bounds(step_trace, (0.0, 20 * FRAME, 40 * FRAME, step_trace.L))
    assert bounds.tolist() == [0, 20, 40, 60]


def test_log_likelihood_matches_independent_gaussians(step_trace, params):
    state = ChangePointState(s=(0.0, 20 * FRAME, 40 * FRAME, step_trace.L), n=(2, 1, 0))
    counts = frame_counts(step_trace, state)
    expected = stats.norm.logpdf(
        step_trace.intensities,
        loc=params.mu_f * counts + params.mu_b,
        scale=np.sqrt(params.sigma_f2 * counts + params.sigma_b2),
    ).sum()
    assert log_likelihood(step_trace, state, params) == pytest.approx(expected, rel=1e-12)


def test_true_step_beats_shifted_step():
    trace = Trace.from_intensities([10.0] * 10 + [0.0] * 10, frame_width=1.0)
    params = IntensityParams(mu_f=10.0, mu_b=0.0, sigma_f2=1.0, sigma_b2=1.0)
    true = ChangePointState(s=(0.0, 10.0, 20.0), n=(1, 0))
    shifted = ChangePointState(s=(0.0, 13.0, 20.0), n=(1, 0))
    assert log_likelihood(trace, true, params) > log_likelihood(trace, shifted, params)


# --- Priors ---


def test_location_prior_values():
    assert log_location_prior((), 0, 2.0) == pytest.approx(0.0)
    # 3! * 0.5 * 0.5 on (0, 1)
    assert log_location_prior((0.5,), 1, 1.0) == pytest.approx(math.log(1.5))


def test_location_prior_rejects_coincident_points():
    with pytest.raises(DegenerateConfigurationError):
        log_location_prior((0.4, 0.4), 2, 1.0)


def test_location_prior_integrates_to_one():
    one, _ = integrate.quad(lambda s: math.exp(log_location_prior((s,), 1, 1.0)), 0.0, 1.0)
    assert one == pytest.approx(1.0, abs=1e-3)
    two, _ = integrate.dblquad(
        lambda s2, s1: math.exp(log_location_prior((s1, s2), 2, 1.0)) if s2 > s1 else 0.0,
        0.0,
        1.0,
        lambda s1: s1,
        lambda s1: 1.0,
    )
    assert two == pytest.approx(1.0, abs=1e-3)


@pytest.mark.slow
def test_location_prior_matches_even_order_statistics():
    rng = np.random.default_rng(7)
    draws = np.sort(rng.random((100_000, 5)), axis=1)[:, [1, 3]]
    # marginal of the 2nd of 5 uniform order statistics is Beta(2, 4)
    assert stats.kstest(draws[:, 0], stats.beta(2, 4).cdf).pvalue > 0.01
    assert stats.kstest(draws[:, 1], stats.beta(4, 2).cdf).pvalue > 0.01
    # joint density check at a few points via a 2-D histogram
    hist, xe, ye = np.histogram2d(draws[:, 0], draws[:, 1], bins=10, range=[[0, 1], [0, 1]], density=True)
    centres = [(0.25, 0.75), (0.35, 0.65), (0.15, 0.55)]
    for s1, s2 in centres:
        i = np.searchsorted(xe, s1) - 1
        j = np.searchsorted(ye, s2) - 1
        assert hist[i, j] == pytest.approx(math.exp(log_location_prior((s1, s2), 2, 1.0)), rel=0.15)


def test_k_prior_is_truncated(hyper):
    assert log_k_prior(hyper.k_max + 1, hyper) == -math.inf
    assert log_k_prior(-1, hyper) == -math.inf
    assert log_k_prior(2, hyper) == pytest.approx(stats.poisson.logpmf(2, hyper.lam))
    assert log_kt_prior(2, hyper) == pytest.approx(stats.poisson.logpmf(2, hyper.lam_t))


def test_param_prior_unknown_name(hyper):
    with pytest.raises(ValidationError):
        log_param_prior("sigma", 1.0, hyper)


def test_param_prior_uses_inverse_gamma(hyper):
    value = log_param_prior("sigma_b2", 500.0, hyper)
    assert value == pytest.approx(stats.invgamma.logpdf(500.0, hyper.alpha_b, scale=hyper.beta_b))


# --- Dwelling counts ---


def test_fit_recovers_true_counts(step_trace, params):
    s = (0.0, 20 * FRAME, 40 * FRAME, step_trace.L)
    assert fit_dwelling_counts(step_trace, s, params) == (2, 1, 0)


def test_fit_forces_a_change_and_breaks_ties_upwards():
    trace = Trace.from_intensities([1000.0] * 10, frame_width=1.0)
    params = IntensityParams(mu_f=1000.0, mu_b=0.0, sigma_f2=1.0, sigma_b2=1.0)
    assert fit_dwelling_counts(trace, (0.0, 5.0, 10.0), params) == (2, 1)


def test_fit_moves_zero_tie_to_one():
    trace = Trace.from_intensities([0.0] * 10, frame_width=1.0)
    params = IntensityParams(mu_f=1000.0, mu_b=0.0, sigma_f2=1.0, sigma_b2=1.0)
    assert fit_dwelling_counts(trace, (0.0, 5.0, 10.0), params) == (1, 0)


def test_fit_rejects_empty_dwelling(params):
    trace = make_step_trace()
    s = (0.0, 20.1 * FRAME, 20.3 * FRAME, trace.L)
    with pytest.raises(InvalidConfigurationError):
        fit_dwelling_counts(trace, s, params)


def _exhaustive_counts(means, mu_f, mu_b, n_max=20):
    # every count sequence over 0..n_max with no two equal neighbours,
    # narrowed from the last dwelling back: best fit first, then the larger count
    grid = np.indices((n_max + 1,) * len(means), dtype=np.int8).reshape(len(means), -1).T
    grid = grid[np.all(np.diff(grid, axis=1) != 0, axis=1)]
    for j in range(len(means) - 1, -1, -1):
        residual = np.abs(means[j] - (mu_f * grid[:, j] + mu_b))
        grid = grid[np.isclose(residual, residual.min(), rtol=0.0, atol=1e-9)]
        grid = grid[grid[:, j] == grid[:, j].max()]
    return tuple(int(n) for n in grid[0])


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_fit_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    params = IntensityParams(mu_f=1000.0, mu_b=50.0, sigma_f2=900.0, sigma_b2=900.0)
    lengths = rng.integers(3, 11, size=5)
    levels = rng.integers(0, 4, size=5)
    y = np.repeat(levels * params.mu_f + params.mu_b, lengths) + rng.normal(0.0, 300.0, lengths.sum())
    trace = Trace.from_intensities(y, frame_width=1.0)
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    means = np.array([y[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    expected = _exhaustive_counts(means, params.mu_f, params.mu_b)
    assert fit_dwelling_counts(trace, tuple(float(b) for b in bounds), params) == expected
