# photostep_core/model.py
"""
Multiple change-point model for photobleach step analysis.

This module holds the domain value types (Trace, ChangePointState,
IntensityParams, Hyperparams) and the pure functions the sampler is built on:

- the Gaussian step likelihood, where a frame with n active fluorophores has
  mean ``mu_f * n + mu_b`` and variance ``sigma_f2 * n + sigma_b2``;
- the change-point location prior (locations distributed as the even-numbered
  order statistics of 2k+1 uniform draws on (0, L));
- the truncated Poisson priors on k and k_t and the normal / inverse-gamma
  priors on the intensity parameters;
- the dwelling fluorophore-count fitter with forced perturbation.

All types are immutable; every function is pure.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Any, Optional, Sequence

import numpy as np
from scipy import special, stats

from .exceptions import (
    DegenerateConfigurationError,
    InvalidConfigurationError,
    ValidationError,
)

log = logging.getLogger(__name__)

# --- Constants ---
DEFAULT_FRAME_WIDTH = 20e-6  # seconds; traces are binned at 20 µs
LOG_2PI = math.log(2.0 * math.pi)


# --- Domain Types ---


@dataclass(frozen=True, eq=False)
class Trace:
    """An observed intensity time series.

    ``times`` are frame midpoints, ``intensities`` the (baseline corrected)
    photon counts per frame and ``L`` the time of the final frame boundary.
    """

    times: np.ndarray
    intensities: np.ndarray
    L: float
    trace_id: str = "trace"

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        intensities = np.array(self.intensities, dtype=float)
        if times.ndim != 1 or intensities.ndim != 1:
            raise ValidationError("Trace times and intensities must be one-dimensional.")
        if times.shape != intensities.shape:
            raise ValidationError(
                f"Trace length mismatch: {times.size} times vs {intensities.size} intensities."
            )
        if times.size < 2:
            raise ValidationError(f"A trace needs at least 2 frames, got {times.size}.")
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(intensities)):
            raise ValidationError("Trace contains non-finite values.")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("Trace times must be strictly increasing.")
        if times[0] <= 0:
            raise ValidationError("Frame midpoints must be positive (the trace starts at 0).")
        if self.L < times[-1]:
            raise ValidationError(f"L={self.L} precedes the final frame time {times[-1]}.")
        times.flags.writeable = False
        intensities.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "intensities", intensities)
        object.__setattr__(self, "L", float(self.L))

    @classmethod
    def from_intensities(
        cls,
        intensities: Sequence[float],
        frame_width: float = DEFAULT_FRAME_WIDTH,
        trace_id: str = "trace",
    ) -> Trace:
        """Builds a trace of equally wide frames starting at time 0."""
        values = np.asarray(intensities, dtype=float)
        times = (np.arange(values.size) + 0.5) * frame_width
        return cls(times=times, intensities=values, L=values.size * frame_width, trace_id=trace_id)

    @property
    def N(self) -> int:
        return int(self.times.size)

    @property
    def frame_width(self) -> float:
        return self.L / self.N

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Prefix sums of the intensities with a leading zero."""
        return np.concatenate(([0.0], np.cumsum(self.intensities)))


@dataclass(frozen=True)
class ChangePointState:
    """The trans-dimensional model state.

    ``s`` holds k+2 times with ``s[0] = 0`` and ``s[-1] = L``; ``n`` the k+1
    per-dwelling active fluorophore counts; ``short_flags`` marks the change
    points that belong to a short-lived pair and ``k_t`` counts them.
    """

    s: tuple[float, ...]
    n: tuple[int, ...]
    k_t: int = 0
    short_flags: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        s = tuple(float(v) for v in self.s)
        n = tuple(int(v) for v in self.n)
        k = len(s) - 2
        flags = tuple(bool(v) for v in self.short_flags) if self.short_flags else (False,) * max(k, 0)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "short_flags", flags)

        if k < 0 or s[0] != 0.0:
            raise ValidationError("Change-point locations must start with s[0] = 0 and end with L.")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValidationError(f"Change-point locations must be strictly increasing: {s}")
        if len(n) != k + 1:
            raise ValidationError(f"Expected {k + 1} dwelling counts, got {len(n)}.")
        if any(v < 0 for v in n):
            raise ValidationError(f"Fluorophore counts must be non-negative: {n}")
        if any(a == b for a, b in zip(n, n[1:])):
            raise ValidationError(f"Adjacent dwellings share a count, so a change point is spurious: {n}")
        if len(flags) != k or sum(flags) != self.k_t:
            raise ValidationError(f"short_flags {flags} disagree with k_t={self.k_t}.")
        if self.k_t % 2 or not 0 <= self.k_t <= k:
            raise ValidationError(f"k_t must be even and within [0, k]; got k_t={self.k_t}, k={k}.")

    @property
    def k(self) -> int:
        return len(self.s) - 2

    @property
    def L(self) -> float:
        return self.s[-1]

    @property
    def interior(self) -> tuple[float, ...]:
        return self.s[1:-1]


@dataclass(frozen=True)
class IntensityParams:
    """The four continuous intensity parameters."""

    mu_f: float
    mu_b: float
    sigma_f2: float
    sigma_b2: float

    def __post_init__(self):
        if not (self.mu_f > 0):
            raise ValidationError(f"mu_f must be positive, got {self.mu_f}.")
        if not (self.sigma_f2 > 0 and self.sigma_b2 > 0):
            raise ValidationError(
                f"Variances must be positive, got sigma_f2={self.sigma_f2}, sigma_b2={self.sigma_b2}."
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_f, self.mu_b, self.sigma_f2, self.sigma_b2])


PARAM_NAMES = ("mu_f", "mu_b", "sigma_f2", "sigma_b2")


@dataclass(frozen=True)
class Hyperparams:
    """Fixed prior and proposal constants.

    ``c`` and ``gamma`` are the caps on ``b_k + d_k`` and ``a + r``; the move
    module derives the largest scaling constants that respect them. ``tau`` is
    in the same time units as the change-point locations.
    """

    eta_f: float
    nu_f: float
    eta_b: float
    nu_b: float
    alpha_f: float
    beta_f: float
    alpha_b: float
    beta_b: float
    lam: float = 2.5
    lam_t: float = 0.001
    k_max: int = 50
    tau: float = 10 * DEFAULT_FRAME_WIDTH
    p_accept: float = 0.5
    c: float = 0.5
    gamma: float = 0.1
    proposal_scale_f: float = 0.01
    proposal_scale_b: float = 0.01
    variance_proposal_scale: float = 0.1

    def __post_init__(self):
        if not 0 < self.p_accept < 1:
            raise ValidationError(f"p_accept must lie in (0, 1), got {self.p_accept}.")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}.")
        if self.k_max < 0:
            raise ValidationError(f"k_max must be non-negative, got {self.k_max}.")
        if self.lam <= 0 or self.lam_t <= 0:
            raise ValidationError("Poisson means lambda and lambda_t must be positive.")
        if self.nu_f <= 0 or self.nu_b <= 0:
            raise ValidationError("Prior variances nu_f and nu_b must be positive.")
        if min(self.alpha_f, self.beta_f, self.alpha_b, self.beta_b) <= 0:
            raise ValidationError("Inverse-gamma shapes and scales must be positive.")
        if not (0 < self.c <= 1 and 0 < self.gamma <= 1 and self.c + self.gamma < 1):
            raise ValidationError(f"Move caps c={self.c}, gamma={self.gamma} leave no room for shifts.")

    @property
    def lambda_D(self) -> float:
        """Rate of the short-lived duration law, chosen so P(D > tau) = p_accept."""
        return -math.log(self.p_accept) / self.tau

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Hyperparams:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"Unknown hyperparameter field(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ValidationError(f"Incomplete hyperparameters: {e}") from e


# --- Frame Assignment ---


def dwelling_bounds(trace: Trace, s: Sequence[float]) -> np.ndarray:
    """Frame index boundaries of each dwelling.

    Frame i belongs to dwelling j iff ``s[j] <= times[i] < s[j+1]``; the final
    frame always belongs to the last dwelling. Dwelling j spans frames
    ``bounds[j]:bounds[j+1]``.
    """
    interior = np.asarray(s[1:-1], dtype=float)
    bounds = np.empty(interior.size + 2, dtype=np.int64)
    bounds[0] = 0
    bounds[-1] = trace.N
    bounds[1:-1] = np.searchsorted(trace.times, interior, side="left")
    return bounds


def frame_counts(trace: Trace, state: ChangePointState) -> np.ndarray:
    """Per-frame active fluorophore counts implied by a state."""
    bounds = dwelling_bounds(trace, state.s)
    return np.repeat(np.asarray(state.n, dtype=np.int64), np.diff(bounds))


def predicted_intensity(counts: np.ndarray, params: IntensityParams) -> np.ndarray:
    return params.mu_f * np.asarray(counts, dtype=float) + params.mu_b


# --- Likelihood ---


def log_likelihood_frames(y: np.ndarray, counts: np.ndarray, params: IntensityParams) -> float:
    counts = counts.astype(float)
    mean = params.mu_f * counts + params.mu_b
    var = params.sigma_f2 * counts + params.sigma_b2
    if np.any(var <= 0):
        raise ValidationError("Non-positive per-frame variance in the likelihood.")
    resid = y - mean
    return float(-0.5 * (y.size * LOG_2PI + np.sum(np.log(var)) + np.sum(resid * resid / var)))


def log_likelihood(trace: Trace, state: ChangePointState, params: IntensityParams) -> float:
    """Gaussian step log-likelihood of the trace under a state."""
    return log_likelihood_frames(trace.intensities, frame_counts(trace, state), params)


def log_likelihood_counts(
    trace: Trace, s: Sequence[float], n: Sequence[int], params: IntensityParams
) -> float:
    """Same as `log_likelihood` for raw locations and counts."""
    bounds = dwelling_bounds(trace, s)
    counts = np.repeat(np.asarray(n, dtype=np.int64), np.diff(bounds))
    return log_likelihood_frames(trace.intensities, counts, params)


# --- Priors ---


def log_location_prior(s: Sequence[float], k: int, L: float) -> float:
    """Log density of k interior locations as even-numbered order statistics.

    ``f(s_1..s_k) = (2k+1)! / L^(2k+1) * prod_{i=0..k} (s_{i+1} - s_i)`` with
    ``s_0 = 0`` and ``s_{k+1} = L``. ``s`` holds the k interior locations.

    Raises:
        DegenerateConfigurationError: If two locations coincide or leave (0, L).
    """
    interior = np.asarray(s, dtype=float)
    if interior.size != k:
        raise ValidationError(f"Expected {k} locations, got {interior.size}.")
    gaps = np.diff(np.concatenate(([0.0], interior, [L])))
    if np.any(gaps <= 0):
        raise DegenerateConfigurationError(f"Change points coincide or escape (0, L): {tuple(interior)}")
    return float(special.gammaln(2 * k + 2) - (2 * k + 1) * math.log(L) + np.sum(np.log(gaps)))


@lru_cache(maxsize=64)
def _poisson_tables(lam: float, lam_t: float, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    ks = np.arange(k_max + 3)
    log_pk = stats.poisson.logpmf(ks, lam)
    log_pkt = stats.poisson.logpmf(ks, lam_t)
    log_pk[k_max + 1 :] = -np.inf
    log_pk.flags.writeable = False
    log_pkt.flags.writeable = False
    return log_pk, log_pkt


def log_k_prior(k: int, hyper: Hyperparams) -> float:
    """Log Poisson(lambda) mass of k, truncated to 0..k_max (unnormalised)."""
    if k < 0 or k > hyper.k_max:
        return -math.inf
    return float(_poisson_tables(hyper.lam, hyper.lam_t, hyper.k_max)[0][k])


def log_kt_prior(k_t: int, hyper: Hyperparams) -> float:
    """Log Poisson(lambda_t) mass of the number of short-lived change points."""
    if k_t < 0 or k_t > hyper.k_max + 2:
        return -math.inf
    return float(_poisson_tables(hyper.lam, hyper.lam_t, hyper.k_max)[1][k_t])


def log_param_prior(name: str, value: float, hyper: Hyperparams) -> float:
    """Log prior density of one intensity parameter."""
    if name == "mu_f":
        return float(stats.norm.logpdf(value, hyper.eta_f, math.sqrt(hyper.nu_f)))
    if name == "mu_b":
        return float(stats.norm.logpdf(value, hyper.eta_b, math.sqrt(hyper.nu_b)))
    if name == "sigma_f2":
        return float(stats.invgamma.logpdf(value, hyper.alpha_f, scale=hyper.beta_f))
    if name == "sigma_b2":
        return float(stats.invgamma.logpdf(value, hyper.alpha_b, scale=hyper.beta_b))
    raise ValidationError(f"Unknown intensity parameter '{name}'.")


def log_intensity_prior(params: IntensityParams, hyper: Hyperparams) -> float:
    return sum(log_param_prior(name, getattr(params, name), hyper) for name in PARAM_NAMES)


def log_posterior(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    log_lik: Optional[float] = None,
) -> float:
    """Unnormalised log posterior of a full state.

    `log_lik` is the already known log likelihood of `state` and `params`.
    """
    if log_lik is None:
        log_lik = log_likelihood(trace, state, params)
    return (
        log_lik
        + log_k_prior(state.k, hyper)
        + log_kt_prior(state.k_t, hyper)
        + log_location_prior(state.interior, state.k, state.L)
        + log_intensity_prior(params, hyper)
    )


# --- Dwelling Counts ---


def _nearest_count(mean: float, params: IntensityParams) -> int:
    # argmin over n >= 0 of |mean - (mu_f n + mu_b)|; exact halves round up
    return max(0, int(math.floor((mean - params.mu_b) / params.mu_f + 0.5)))


def fit_dwelling_counts(
    trace: Trace, s: Sequence[float], params: IntensityParams
) -> tuple[int, ...]:
    """Best-fit integer counts per dwelling with forced perturbation.

    Dwellings are fitted from the end of the trace to the beginning. When a
    dwelling's best count equals the already fixed later neighbour it is moved
    by one in whichever direction fits its mean better (ties go up; a tie at
    zero is forced to one), so every change point is a genuine change.

    Raises:
        InvalidConfigurationError: If a dwelling contains no frames.
    """
    bounds = dwelling_bounds(trace, s)
    sizes = np.diff(bounds)
    if np.any(sizes <= 0):
        raise InvalidConfigurationError(f"Empty dwelling for locations {tuple(s)}")
    cum = trace.cumulative
    means = (cum[bounds[1:]] - cum[bounds[:-1]]) / sizes

    counts = [0] * len(means)
    later: Optional[int] = None
    for j in range(len(means) - 1, -1, -1):
        mean = float(means[j])
        n_j = _nearest_count(mean, params)
        if later is not None and n_j == later:
            if n_j == 0:
                n_j = 1
            else:
                up = abs(mean - (params.mu_f * (n_j + 1) + params.mu_b))
                down = abs(mean - (params.mu_f * (n_j - 1) + params.mu_b))
                n_j = n_j + 1 if up <= down else n_j - 1
        counts[j] = n_j
        later = n_j
    return tuple(counts)
