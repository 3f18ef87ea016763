# photostep_core/gibbs.py
"""
Intensity parameters: hyperparameter estimation, pooling and Gibbs updates.

Before sampling, every trace gets a rough estimate of the single-fluorophore
and background levels from the peaks of its location proposal. Estimates from
traces recorded under the same conditions are pooled by a noise-weighted
average into one Hyperparams set.

During sampling, the four intensity parameters are updated one at a time by
random-walk Metropolis steps in the fixed order mu_f, mu_b, sigma_f2,
sigma_b2. Dwelling counts stay fixed within a sweep.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import signal, stats

from .exceptions import ValidationError
from .model import (
    PARAM_NAMES,
    ChangePointState,
    Hyperparams,
    IntensityParams,
    Trace,
    dwelling_bounds,
    frame_counts,
    log_likelihood_frames,
    log_param_prior,
)
from .proposal import ProposalDistribution, window_edges

log = logging.getLogger(__name__)

# --- Constants ---
WEIGHTING_SCHEMES = ("homogeneous", "heterogeneous")
MIN_BACKGROUND_SHAPE = 1.0
# histogram peaks below this fraction of the tallest bin are noise
PEAK_PROMINENCE = 0.1


@dataclass(frozen=True)
class TraceHyperEstimate:
    """Per-trace hyperparameter estimates and the trace's pooling weight."""

    eta_f_hat: float
    eta_b_hat: float
    alpha_f_hat: float
    beta_f_hat: float
    alpha_b_hat: float
    beta_b_hat: float
    weight: float
    low_confidence: bool = False
    n_candidates: int = 0
    trace_id: str = "trace"

    def __post_init__(self):
        if not self.weight > 0:
            raise ValidationError(f"Pooling weight must be positive, got {self.weight}.")
        if not math.isclose(self.beta_f_hat, self.eta_f_hat * (self.alpha_f_hat + 1), rel_tol=1e-12):
            raise ValidationError("beta_f_hat must equal eta_f_hat * (alpha_f_hat + 1).")


# --- Estimation ---


def _section_bounds(trace: Trace, cuts: Sequence[int]) -> np.ndarray:
    return np.concatenate(([0], np.asarray(cuts, dtype=np.int64), [trace.N]))


def _section_means(trace: Trace, cuts: Sequence[int]) -> np.ndarray:
    bounds = _section_bounds(trace, cuts)
    cum = trace.cumulative
    return (cum[bounds[1:]] - cum[bounds[:-1]]) / np.diff(bounds)


def _section_stats(trace: Trace, cuts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Means and variances of the sections between frame-index cuts."""
    bounds = _section_bounds(trace, cuts)
    y = trace.intensities
    variances = np.array([y[a:b].var() for a, b in zip(bounds[:-1], bounds[1:])])
    return _section_means(trace, cuts), variances


def mode_intensity(trace: Trace) -> float:
    """Centre of the most populated intensity histogram bin."""
    counts, edges = np.histogram(trace.intensities, bins="auto")
    top = int(np.argmax(counts))
    return float(0.5 * (edges[top] + edges[top + 1]))


def single_level_intensity(trace: Trace, window_size: int = 10) -> float:
    """
    Lowest prominent intensity level above the background, relative to it.

    The background reference is the median of the final half window (the
    trace is assumed to end photobleached). Histogram peaks within three robust
    standard deviations (or one bin) of it are background; the lowest peak
    beyond that is the one-fluorophore level. Falls back to `mode_intensity`
    when no such peak exists.
    """
    y = trace.intensities
    tail = y[-min(max(2, window_size // 2), trace.N):]
    reference = float(np.median(tail))
    spread = 1.4826 * float(np.median(np.abs(tail - reference)))
    counts, edges = np.histogram(y, bins="auto")
    centres = 0.5 * (edges[:-1] + edges[1:])
    # zero padding lets a level in the first or last bin count as a peak
    peaks, _ = signal.find_peaks(np.pad(counts, 1), prominence=PEAK_PROMINENCE * counts.max())
    levels = centres[peaks - 1] - reference
    levels = levels[levels > max(3.0 * spread, float(edges[1] - edges[0]))]
    if levels.size == 0:
        return abs(mode_intensity(trace))
    return float(levels.min())


def _drop_weak_cuts(trace: Trace, cuts: list[int], floor: float) -> list[int]:
    # removes only the weakest cut per pass, then re-measures its neighbours
    cuts = list(cuts)
    while cuts:
        diffs = np.abs(np.diff(_section_means(trace, cuts)))
        weakest = int(np.argmin(diffs))
        if diffs[weakest] >= floor:
            break
        del cuts[weakest]
    return cuts


def _refine_cuts(trace: Trace, cuts: list[int], reach: int) -> list[int]:
    """Moves each cut to the best split between its neighbours within `reach` frames."""
    cum = trace.cumulative
    cuts = list(cuts)
    for i, cut in enumerate(cuts):
        lo = cuts[i - 1] if i > 0 else 0
        hi = cuts[i + 1] if i + 1 < len(cuts) else trace.N
        js = np.arange(max(lo + 1, cut - reach), min(hi - 1, cut + reach) + 1)
        if js.size == 0:
            continue
        left, right = cum[js] - cum[lo], cum[hi] - cum[js]
        # the two-section squared error is smallest where this is largest
        score = left**2 / (js - lo) + right**2 / (hi - js)
        cuts[i] = int(js[int(np.argmax(score))])
    return cuts


def trace_weight(trace: Trace, weighting: str = "homogeneous", window_size: int = 10) -> float:
    """Pooling weight: less noisy traces count more.

    ``homogeneous`` uses the inverse trace variance; ``heterogeneous`` the
    inverse of (mean window variance * maximum intensity * trace length).
    """
    y = trace.intensities
    if weighting == "homogeneous":
        noise = float(np.var(y))
    elif weighting == "heterogeneous":
        edges = window_edges(trace.N, window_size)
        window_var = np.mean([y[a:b].var() for a, b in zip(edges[:-1], edges[1:])])
        noise = float(window_var * np.max(np.abs(y)) * trace.N)
    else:
        raise ValidationError(f"Unknown weighting scheme '{weighting}'; expected one of {WEIGHTING_SCHEMES}.")
    return 1.0 / noise if noise > 0 and np.isfinite(noise) else 1.0


def estimate_trace_hyperparams(
    trace: Trace,
    dist: ProposalDistribution,
    intensity_floor: Optional[float] = None,
    floor_multiplier: float = 0.9,
    weighting: str = "homogeneous",
) -> TraceHyperEstimate:
    """
    Estimates intensity hyperparameters from the proposal peaks of one trace.

    Candidate change points are the local maxima of the proposal. While the
    weakest candidate's neighbouring sections differ in mean by less than the
    intensity floor, that candidate is dropped and the sections recomputed.
    Survivors are then moved to the best-fitting frame boundary nearby. The
    single fluorophore level is the mean absolute section difference at the
    survivors; the background is the final section.

    Args:
        trace: The trace the proposal was built from.
        dist: Its location proposal.
        intensity_floor: Lower bound on a single-fluorophore step; None uses
                         `floor_multiplier` times `single_level_intensity`.
        floor_multiplier: Scaling of the level intensity for the automatic floor.
        weighting: Pooling weight scheme, 'homogeneous' or 'heterogeneous'.
    """
    if intensity_floor is None:
        floor = single_level_intensity(trace, dist.window_size) * floor_multiplier
    else:
        floor = float(intensity_floor)
    peaks, _ = signal.find_peaks(dist.pmf)
    frames = np.unique(np.searchsorted(trace.times, dist.grid[peaks], side="left"))
    cuts = [int(c) for c in frames if 0 < c < trace.N]
    n_candidates = len(cuts)

    cuts = _drop_weak_cuts(trace, cuts, floor)
    cuts = _drop_weak_cuts(trace, _refine_cuts(trace, cuts, dist.window_size), floor)

    means, variances = _section_stats(trace, cuts)
    eta_b = float(means[-1])
    low_confidence = not cuts
    if cuts:
        eta_f = float(np.mean(np.abs(np.diff(means))))
    else:
        eta_f = floor if floor > 0 else float(np.std(trace.intensities)) or 1.0
        log.warning(
            f"No candidate step in trace {trace.trace_id} clears the floor {floor:.4g}; "
            f"falling back to eta_f={eta_f:.4g} (low confidence)."
        )
    log.debug(
        f"Trace {trace.trace_id}: {len(cuts)} of {n_candidates} candidate steps kept "
        f"(floor {floor:.4g}), eta_f={eta_f:.4g}, eta_b={eta_b:.4g}"
    )

    alpha_f = eta_f
    alpha_b = max(float(variances[-1]), MIN_BACKGROUND_SHAPE)
    return TraceHyperEstimate(
        eta_f_hat=eta_f,
        eta_b_hat=eta_b,
        alpha_f_hat=alpha_f,
        beta_f_hat=eta_f * (alpha_f + 1),
        alpha_b_hat=alpha_b,
        beta_b_hat=alpha_b * (alpha_b + 1),
        weight=trace_weight(trace, weighting, dist.window_size),
        low_confidence=low_confidence,
        n_candidates=n_candidates,
        trace_id=trace.trace_id,
    )


# --- Pooling ---


def _weighted_mean(values: Sequence[float], weights: Sequence[float], total: float) -> float:
    # fsum keeps the result independent of input order
    return math.fsum(w * v for w, v in zip(weights, values)) / total


def pool_hyperparams(
    estimates: Sequence[TraceHyperEstimate],
    scaling_f: float = 0.005,
    scaling_b: float = 1.0,
    base: Optional[Hyperparams] = None,
) -> Hyperparams:
    """
    Pools per-trace estimates into one Hyperparams by weighted averaging.

    ``nu_f = scaling_f * eta_f``; ``nu_b = scaling_b * max(|eta_b|, sd_b)``
    where sd_b is the square root of the pooled background variance mode,
    since baseline-corrected traces put eta_b near zero. Fields other than the
    intensity priors come from `base` (defaults if None). Low-confidence
    estimates are left out whenever at least one confident estimate exists.

    Raises:
        ValidationError: If `estimates` is empty or the total weight is zero.
    """
    if not estimates:
        raise ValidationError("Cannot pool an empty set of hyperparameter estimates.")
    confident = [e for e in estimates if not e.low_confidence]
    if confident and len(confident) < len(estimates):
        log.info(f"Pooling skips {len(estimates) - len(confident)} low-confidence estimates.")
        estimates = confident
    weights = [e.weight for e in estimates]
    total = math.fsum(weights)
    if not total > 0:
        raise ValidationError("Total pooling weight is zero.")

    def pooled(attr: str) -> float:
        return _weighted_mean([getattr(e, attr) for e in estimates], weights, total)

    eta_f, eta_b = pooled("eta_f_hat"), pooled("eta_b_hat")
    alpha_f, beta_f = pooled("alpha_f_hat"), pooled("beta_f_hat")
    alpha_b, beta_b = pooled("alpha_b_hat"), pooled("beta_b_hat")
    sd_b = math.sqrt(beta_b / (alpha_b + 1))
    fields = {
        "eta_f": eta_f,
        "nu_f": scaling_f * eta_f,
        "eta_b": eta_b,
        "nu_b": scaling_b * max(abs(eta_b), sd_b),
        "alpha_f": alpha_f,
        "beta_f": beta_f,
        "alpha_b": alpha_b,
        "beta_b": beta_b,
    }
    log.debug(f"Pooled {len(estimates)} estimates: eta_f={eta_f:.4g}, eta_b={eta_b:.4g}")
    if base is None:
        return Hyperparams(**fields)
    return dataclasses.replace(base, **fields)


# --- Gibbs Updates ---


def initial_params(hyper: Hyperparams) -> IntensityParams:
    """Prior means for the levels, prior modes for the variances."""
    return IntensityParams(
        mu_f=hyper.eta_f,
        mu_b=hyper.eta_b,
        sigma_f2=hyper.beta_f / (hyper.alpha_f + 1),
        sigma_b2=hyper.beta_b / (hyper.alpha_b + 1),
    )


def _proposal_sd(name: str, value: float, hyper: Hyperparams) -> float:
    if name == "mu_f":
        return hyper.proposal_scale_f * abs(hyper.eta_f)
    if name == "mu_b":
        return hyper.proposal_scale_b * max(abs(hyper.eta_b), math.sqrt(hyper.beta_b / (hyper.alpha_b + 1)))
    return hyper.variance_proposal_scale * value


def _is_valid(name: str, value: float) -> bool:
    return name == "mu_b" or value > 0


def sweep_with_likelihood(
    trace: Trace,
    counts: np.ndarray,
    params: IntensityParams,
    hyper: Hyperparams,
    rng: np.random.Generator,
    use_likelihood: bool = True,
) -> tuple[IntensityParams, tuple[bool, ...], float]:
    """One Metropolis-within-Gibbs sweep over (mu_f, mu_b, sigma_f2, sigma_b2).

    Means use symmetric random walks. Variance proposals scale with the
    current value, so their Hastings correction is included. With
    `use_likelihood=False` the target is the prior alone.

    Returns:
        The new parameters, per-parameter acceptance flags and the log
        likelihood of the new parameters (0 with `use_likelihood=False`).
    """
    values = dict(zip(PARAM_NAMES, params.as_array().tolist()))
    y = trace.intensities

    def log_lik(vals: dict) -> float:
        if not use_likelihood:
            return 0.0
        return log_likelihood_frames(y, counts, IntensityParams(**vals))

    current_ll = log_lik(values)
    accepted = []
    for name in PARAM_NAMES:
        old = values[name]
        sd_old = _proposal_sd(name, old, hyper)
        new = old + sd_old * rng.standard_normal()
        u = rng.random()
        if not _is_valid(name, new):
            accepted.append(False)
            continue
        trial = {**values, name: new}
        trial_ll = log_lik(trial)
        log_alpha = trial_ll - current_ll + log_param_prior(name, new, hyper) - log_param_prior(name, old, hyper)
        if name in ("sigma_f2", "sigma_b2"):
            sd_new = _proposal_sd(name, new, hyper)
            log_alpha += stats.norm.logpdf(old, new, sd_new) - stats.norm.logpdf(new, old, sd_old)
        if u < math.exp(min(0.0, log_alpha)):
            values = trial
            current_ll = trial_ll
            accepted.append(True)
        else:
            accepted.append(False)
    return IntensityParams(**values), tuple(accepted), current_ll


def gibbs_sweep(
    trace: Trace,
    counts: np.ndarray,
    params: IntensityParams,
    hyper: Hyperparams,
    rng: np.random.Generator,
    use_likelihood: bool = True,
) -> tuple[IntensityParams, tuple[bool, ...]]:
    """`sweep_with_likelihood` without the likelihood."""
    new_params, accepted, _ = sweep_with_likelihood(trace, counts, params, hyper, rng, use_likelihood)
    return new_params, accepted


def gibbs_update(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    rng: np.random.Generator,
    use_likelihood: bool = True,
) -> IntensityParams:
    """Runs one sweep with the counts implied by `state` held fixed."""
    new_params, _ = gibbs_sweep(trace, frame_counts(trace, state), params, hyper, rng, use_likelihood)
    return new_params
