from __future__ import annotations

import numpy as np
import pytest

from photostep_core.model import Hyperparams, IntensityParams, Trace
from photostep_core.proposal import build_proposal

FRAME = 20e-6
STEP_COUNTS = np.repeat([2, 1, 0], 20)


def make_step_trace(counts=STEP_COUNTS, mu_f=1000.0, noise=30.0, seed=1, trace_id="steps") -> Trace:
    rng = np.random.default_rng(seed)
    counts = np.asarray(counts)
    y = mu_f * counts + rng.normal(0.0, noise, counts.size)
    return Trace.from_intensities(y, frame_width=FRAME, trace_id=trace_id)


def make_hyper(**overrides) -> Hyperparams:
    fields = dict(
        eta_f=1000.0,
        nu_f=2500.0,
        eta_b=0.0,
        nu_b=900.0,
        alpha_f=10.0,
        beta_f=1000.0 * 11.0,
        alpha_b=10.0,
        beta_b=900.0 * 11.0,
        k_max=10,
        tau=10 * FRAME,
    )
    fields.update(overrides)
    return Hyperparams(**fields)


@pytest.fixture
def step_trace() -> Trace:
    """60 frames: two fluorophores, then one, then none (20 frames each)."""
    return make_step_trace()


@pytest.fixture
def hyper() -> Hyperparams:
    return make_hyper()


@pytest.fixture
def params() -> IntensityParams:
    return IntensityParams(mu_f=1000.0, mu_b=0.0, sigma_f2=1000.0, sigma_b2=900.0)


@pytest.fixture
def dist(step_trace):
    return build_proposal(step_trace)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
