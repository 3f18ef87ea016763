from __future__ import annotations

import math

import numpy as np
import pytest

from photostep_core.diagnostics import autocorrelation, ess, mcse, psrf
from photostep_core.exceptions import ConvergenceError


def test_psrf_of_identical_chains_is_one():
    x = np.random.default_rng(0).normal(size=200)
    assert psrf([x, x]) == 1.0
    assert psrf([[3.0] * 10, [3.0] * 10]) == 1.0


def test_psrf_of_distinct_constants_is_infinite():
    assert psrf([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]) == math.inf


def test_psrf_matches_hand_computation():
    # B = 4 * var([2.5, 3.5]) = 2, W = 5/3, var_hat = 3/4 * W + B / 4
    value = psrf([[1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 5.0]])
    assert value == pytest.approx(math.sqrt(1.75 / (5.0 / 3.0)))


def test_psrf_detects_separated_chains():
    rng = np.random.default_rng(1)
    assert psrf([rng.normal(0, 1, 500), rng.normal(5, 1, 500)]) > 2.0
    assert psrf([rng.normal(0, 1, 500), rng.normal(0, 1, 500)]) < 1.05


def test_psrf_input_errors():
    with pytest.raises(ConvergenceError):
        psrf([[1.0, 2.0, 3.0]])
    with pytest.raises(ConvergenceError):
        psrf([[1.0, 2.0, 3.0], [1.0, 2.0]])
    with pytest.raises(ConvergenceError):
        psrf([[1.0], [2.0]])


def test_autocorrelation_starts_at_one():
    rho = autocorrelation(np.random.default_rng(2).normal(size=300))
    assert rho[0] == pytest.approx(1.0)
    assert np.all(np.abs(rho) <= 1.0 + 1e-12)
    assert np.all(autocorrelation(np.ones(5)) == 0.0)


def test_ess_of_constant_sequence_is_its_length():
    assert ess(np.full(50, 2.0)) == 50.0


def test_ess_of_independent_draws_is_near_n():
    x = np.random.default_rng(3).normal(size=5000)
    assert 0.7 * x.size <= ess(x) <= x.size


def test_ess_of_ar1_chain():
    phi, n = 0.9, 50_000
    rng = np.random.default_rng(4)
    noise = rng.normal(size=n)
    x = np.empty(n)
    x[0] = noise[0]
    for i in range(1, n):
        x[i] = phi * x[i - 1] + noise[i]
    expected = n * (1 - phi) / (1 + phi)
    assert ess(x) == pytest.approx(expected, rel=0.25)


def test_ess_needs_two_samples():
    with pytest.raises(ConvergenceError):
        ess([1.0])


def test_mcse_of_independent_draws():
    x = np.random.default_rng(5).normal(0.0, 2.0, 4000)
    assert mcse(x) == pytest.approx(2.0 / math.sqrt(x.size), rel=0.2)
