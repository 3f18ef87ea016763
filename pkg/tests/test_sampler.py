from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from conftest import FRAME, make_step_trace

from photostep_core.exceptions import ConvergenceError, ValidationError
from photostep_core.helpers import read_json, write_json
from photostep_core.metrics import framewise_report
from photostep_core.model import ChangePointState, IntensityParams, log_posterior
from photostep_core.sampler import (
    ChainConfig,
    analyze,
    check_convergence,
    continue_chain,
    initial_state,
    location_density,
    run_chain,
)
from photostep_core.simulator import SimConfig, simulate_trace

SHORT = ChainConfig(n_iter=200, max_iter=400, extension=100, n_chains=2)


# --- Configuration ---


@pytest.mark.parametrize(
    "fields",
    [
        {"n_chains": 1},
        {"n_iter": 500, "max_iter": 100},
        {"burn_in_fraction": 1.0},
        {"psrf_threshold": 0.9},
        {"extension": 0},
    ],
)
def test_chain_config_validation(fields):
    with pytest.raises(ValidationError):
        ChainConfig(**fields)


def test_burn_in_is_a_fraction_of_the_total():
    assert ChainConfig().burn_in(100) == 50
    assert ChainConfig(burn_in_fraction=0.25).burn_in(10) == 2


# --- Running Chains ---


def test_initial_state_sits_at_the_proposal_mode(step_trace, dist, params, hyper):
    state = initial_state(step_trace, dist, params, hyper)
    assert state.k == 1
    assert state.interior[0] == pytest.approx(dist.grid[int(np.argmax(dist.pmf))])


def test_chain_is_reproducible(step_trace, dist, params, hyper):
    a = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=3)
    b = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=3)
    assert len(a) == SHORT.n_iter
    np.testing.assert_array_equal(a.k, b.k)
    np.testing.assert_array_equal(a.params, b.params)
    assert a.locations == b.locations


def test_zero_iterations_returns_the_start(step_trace, dist, params, hyper):
    chain = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=1, n_iter=0)
    assert len(chain) == 0
    assert chain.final_state == initial_state(step_trace, dist, params, hyper)
    assert chain.final_params == params


def test_continuing_a_chain_equals_one_longer_run(step_trace, dist, params, hyper):
    first = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=5, n_iter=120)
    extended = continue_chain(step_trace, dist, hyper, first, SHORT, 80)
    full = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=5, n_iter=200)
    np.testing.assert_array_equal(extended.k, full.k)
    np.testing.assert_array_equal(extended.params, full.params)
    np.testing.assert_array_equal(extended.move_kinds, full.move_kinds)
    assert extended.locations == full.locations
    assert extended.final_state == full.final_state


def test_frame_export_has_one_row_per_iteration(step_trace, dist, params, hyper):
    chain = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=2, n_iter=50)
    frame = chain.to_frame()
    assert len(frame) == 50
    assert {"k", "k_t", "mu_f", "sigma_b2", "move", "accepted"} <= set(frame.columns)
    stats = chain.acceptance_stats()
    assert sum(v["proposed"] for k, v in stats.items() if k not in ("mu_f", "mu_b", "sigma_f2", "sigma_b2")) == 50


# --- Convergence ---


def test_identical_chains_converge(step_trace, dist, params, hyper):
    chain = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=7, n_iter=400)
    report = check_convergence([chain, chain], SHORT)
    assert report.converged
    assert report.pair == (0, 1)
    assert report.psrf_k == 1.0
    assert report.to_dict()["pair"] == [0, 1]


def test_convergence_input_errors(step_trace, dist, params, hyper):
    long = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=1, n_iter=60)
    short = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=2, n_iter=30)
    with pytest.raises(ConvergenceError):
        check_convergence([long, short], SHORT)
    with pytest.raises(ConvergenceError):
        check_convergence([long], SHORT)


def test_disagreeing_modal_k_blocks_convergence(step_trace, dist, params, hyper):
    chain = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=4, n_iter=200)
    a = dataclasses.replace(chain, k=np.concatenate([chain.k[:100], np.repeat([2, 3], [51, 49])]))
    b = dataclasses.replace(chain, k=np.concatenate([chain.k[:100], np.repeat([2, 3], [49, 51])]))
    report = check_convergence([a, b], SHORT)
    assert not report.converged
    assert report.psrf_k < SHORT.psrf_threshold
    assert "modal k" in report.reason


def test_too_short_chains_do_not_converge(step_trace, dist, params, hyper):
    a = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=1, n_iter=2)
    b = run_chain(step_trace, dist, hyper, params, SHORT, chain_seed=2, n_iter=2)
    report = check_convergence([a, b], SHORT)
    assert not report.converged
    assert report.pair is None


# --- Summary ---


def test_location_density_integrates_to_k(step_trace):
    samples = np.tile([20 * FRAME, 40 * FRAME], (10, 1))
    density = location_density(step_trace, samples)
    assert density.sum() * step_trace.frame_width == pytest.approx(2.0, abs=0.05)
    assert location_density(step_trace, np.empty((0, 0))).sum() == 0.0


def test_analyze_counts_two_steps(step_trace, hyper, tmp_path):
    config = ChainConfig(n_iter=1500, max_iter=3000, extension=500, n_chains=2, seed=1)
    summary = analyze(step_trace, hyper, config)
    assert summary.modal_k == 2
    assert summary.frame_counts[0] == 2
    assert summary.frame_counts[-1] == 0
    assert summary.n_iterations >= config.n_iter
    assert sum(summary.k_distribution.values()) == pytest.approx(1.0)
    assert len(summary.locations) == 2
    assert summary.locations[0] == pytest.approx(20 * FRAME, abs=2 * FRAME)
    assert summary.locations[1] == pytest.approx(40 * FRAME, abs=2 * FRAME)

    doc = read_json(write_json(tmp_path / "steps.summary.json", summary.to_dict()))
    assert doc["trace_id"] == "steps"
    assert doc["modal_k"] == 2
    assert len(doc["frame_counts"]) == step_trace.N
    assert {row["parameter"] for row in doc["diagnostics"]} >= {"k", "mu_f", "sigma_b2"}


def test_background_only_trace_has_no_steps(hyper):
    trace = make_step_trace(counts=np.zeros(60, dtype=int), seed=3, trace_id="dark")
    config = ChainConfig(n_iter=600, max_iter=600, n_chains=2, seed=2)
    summary = analyze(trace, hyper, config)
    assert summary.modal_k == 0
    assert set(summary.frame_counts) == {0}


def test_analyze_without_hyperparams_estimates_them(step_trace):
    config = ChainConfig(n_iter=300, max_iter=300, n_chains=2)
    summary = analyze(step_trace, None, config)
    assert summary.n_iterations == 300
    assert len(summary.frame_counts) == step_trace.N


def test_single_fluorophore_frames_are_counted():
    trace, truth = simulate_trace(SimConfig(n_fluorophores=1, mu_f_photons=1000.0, snr=1.0, p_AP=0.002, seed=41))
    config = ChainConfig(n_iter=2000, max_iter=4000, extension=1000, n_chains=2, seed=3)
    summary = analyze(trace, None, config)
    assert framewise_report(truth.counts, summary.frame_counts).accuracy >= 0.99


@pytest.mark.parametrize("update_intensity", [True, False])
def test_recorded_log_posterior_matches_a_fresh_evaluation(step_trace, dist, params, hyper, update_intensity):
    config = dataclasses.replace(SHORT, update_intensity=update_intensity)
    chain = run_chain(step_trace, dist, hyper, params, config, chain_seed=9, n_iter=150)
    for i in range(len(chain)):
        k, k_t = len(chain.locations[i]), int(chain.k_t[i])
        state = ChangePointState(
            (0.0, *chain.locations[i], chain.final_state.L),
            chain.counts[i],
            k_t=k_t,
            short_flags=(True,) * k_t + (False,) * (k - k_t),
        )
        fresh = log_posterior(step_trace, state, IntensityParams(*chain.params[i]), hyper)
        assert chain.log_posterior[i] == pytest.approx(fresh, rel=1e-9)
