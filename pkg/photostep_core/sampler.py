# photostep_core/sampler.py
"""
Chain orchestration for the change-point sampler.

Each iteration draws a move kind from the move probabilities of the current
state, runs that move, then performs one Metropolis-within-Gibbs sweep of the
intensity parameters. Several chains run from independent random streams;
after the initial run their post burn-in samples are checked block by block
(number of change points, modal-k locations, intensity parameters) and the
chains are extended until a pair of chains agrees or the iteration cap is hit.
"""
from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import diagnostics
from .exceptions import ConvergenceError, InvalidConfigurationError, ValidationError
from .gibbs import estimate_trace_hyperparams, initial_params, pool_hyperparams, sweep_with_likelihood
from .helpers import make_rng
from .model import (
    PARAM_NAMES,
    ChangePointState,
    Hyperparams,
    IntensityParams,
    Trace,
    frame_counts,
    log_posterior,
    predicted_intensity,
)
from .moves import MOVE_KINDS, propose_move, state_from_indices, state_from_locations
from .proposal import ProposalDistribution, build_proposal

log = logging.getLogger(__name__)

# --- Constants ---
LOCATION_BANDWIDTH_FRAMES = 2.0
CREDIBLE_MASS = 0.95
_KIND_CODES = {kind: code for code, kind in enumerate(MOVE_KINDS)}


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 20000
    burn_in_fraction: float = 0.5
    extension: int = 10000
    max_iter: int = 100000
    n_chains: int = 3
    psrf_threshold: float = 1.2
    seed: int = 0
    min_modal_samples: int = 10
    update_intensity: bool = True

    def __post_init__(self):
        if self.n_iter < 0 or self.extension < 1:
            raise ValidationError("n_iter must be non-negative and extension positive.")
        if not 0 < self.burn_in_fraction < 1:
            raise ValidationError(f"burn_in_fraction must lie in (0, 1), got {self.burn_in_fraction}.")
        if self.n_chains < 2:
            raise ValidationError(f"Convergence testing needs at least 2 chains, got {self.n_chains}.")
        if self.max_iter < self.n_iter:
            raise ValidationError(f"max_iter ({self.max_iter}) is below n_iter ({self.n_iter}).")
        if self.psrf_threshold < 1:
            raise ValidationError(f"psrf_threshold must be at least 1, got {self.psrf_threshold}.")

    def burn_in(self, total: int) -> int:
        """Index of the first retained iteration for a chain of `total` iterations."""
        return int(math.floor(self.burn_in_fraction * total))


@dataclass
class ChainSample:
    """Per-iteration records of one chain plus what is needed to continue it."""

    chain_index: int
    k: np.ndarray
    k_t: np.ndarray
    locations: list[tuple[float, ...]]
    counts: list[tuple[int, ...]]
    params: np.ndarray
    log_posterior: np.ndarray
    move_kinds: np.ndarray
    accepted: np.ndarray
    gibbs_accepted: np.ndarray
    final_state: ChangePointState
    final_params: IntensityParams
    rng_state: dict[str, Any] = field(repr=False)

    def __len__(self) -> int:
        return int(self.k.size)

    def concat(self, later: ChainSample) -> ChainSample:
        """This chain followed by its continuation."""
        return ChainSample(
            chain_index=self.chain_index,
            k=np.concatenate([self.k, later.k]),
            k_t=np.concatenate([self.k_t, later.k_t]),
            locations=self.locations + later.locations,
            counts=self.counts + later.counts,
            params=np.concatenate([self.params, later.params]),
            log_posterior=np.concatenate([self.log_posterior, later.log_posterior]),
            move_kinds=np.concatenate([self.move_kinds, later.move_kinds]),
            accepted=np.concatenate([self.accepted, later.accepted]),
            gibbs_accepted=np.concatenate([self.gibbs_accepted, later.gibbs_accepted]),
            final_state=later.final_state,
            final_params=later.final_params,
            rng_state=later.rng_state,
        )

    def acceptance_stats(self, start: int = 0) -> dict[str, dict[str, float]]:
        stats_out: dict[str, dict[str, float]] = {}
        kinds = self.move_kinds[start:]
        accepted = self.accepted[start:]
        for kind in MOVE_KINDS:
            mask = kinds == _KIND_CODES[kind]
            proposed = int(mask.sum())
            hits = int(accepted[mask].sum())
            stats_out[kind.value] = {"proposed": proposed, "accepted": hits}
        gibbs = self.gibbs_accepted[start:]
        for j, name in enumerate(PARAM_NAMES):
            stats_out[name] = {"proposed": int(gibbs.shape[0]), "accepted": int(gibbs[:, j].sum())}
        return stats_out

    def to_frame(self) -> pd.DataFrame:
        """One row per iteration, for external diagnostics."""
        frame = pd.DataFrame(
            {
                "iteration": np.arange(len(self)),
                "chain": self.chain_index,
                "k": self.k,
                "k_t": self.k_t,
                "locations": [" ".join(f"{t:.10g}" for t in s) for s in self.locations],
                "counts": [" ".join(str(v) for v in n) for n in self.counts],
                "log_posterior": self.log_posterior,
                "move": [MOVE_KINDS[c].value for c in self.move_kinds],
                "accepted": self.accepted,
            }
        )
        for j, name in enumerate(PARAM_NAMES):
            frame.insert(6 + j, name, self.params[:, j])
        return frame


# --- Running Chains ---


def initial_state(
    trace: Trace, dist: ProposalDistribution, params: IntensityParams, hyper: Hyperparams
) -> ChangePointState:
    """One change point at the proposal's mode, or none if that is not possible."""
    if hyper.k_max >= 1:
        try:
            return state_from_indices(trace, dist, [int(np.argmax(dist.pmf))], params, hyper)
        except InvalidConfigurationError:
            log.debug("Initial change point leaves an empty dwelling; starting from k=0.")
    return state_from_locations(trace, (0.0, trace.L), params, hyper)


def run_chain(
    trace: Trace,
    dist: ProposalDistribution,
    hyper: Hyperparams,
    params_init: IntensityParams,
    config: ChainConfig,
    chain_seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    n_iter: Optional[int] = None,
    state_init: Optional[ChangePointState] = None,
    chain_index: int = 0,
) -> ChainSample:
    """
    Runs one chain for `n_iter` iterations (config.n_iter by default).

    Args:
        rng: Random generator; when None one is seeded from `chain_seed`.
        state_init: Starting state; the default is `initial_state`.
    """
    rng = np.random.default_rng(chain_seed) if rng is None else rng
    n_iter = config.n_iter if n_iter is None else n_iter
    state = initial_state(trace, dist, params_init, hyper) if state_init is None else state_init
    params = params_init

    k = np.empty(n_iter, dtype=np.int64)
    k_t = np.empty(n_iter, dtype=np.int64)
    param_rows = np.empty((n_iter, len(PARAM_NAMES)))
    log_post = np.empty(n_iter)
    kinds = np.empty(n_iter, dtype=np.int8)
    accepted = np.empty(n_iter, dtype=bool)
    gibbs_accepted = np.zeros((n_iter, len(PARAM_NAMES)), dtype=bool)
    locations: list[tuple[float, ...]] = []
    counts: list[tuple[int, ...]] = []

    current_lp: Optional[float] = None
    for it in range(n_iter):
        outcome = propose_move(trace, state, params, hyper, dist, rng)
        moved = outcome.state != state
        state = outcome.state
        if config.update_intensity:
            params, gibbs_flags, log_lik = sweep_with_likelihood(
                trace, frame_counts(trace, state), params, hyper, rng
            )
            gibbs_accepted[it] = gibbs_flags
            current_lp = log_posterior(trace, state, params, hyper, log_lik=log_lik)
        elif current_lp is None or moved:
            current_lp = log_posterior(trace, state, params, hyper)
        k[it] = state.k
        k_t[it] = state.k_t
        locations.append(state.interior)
        counts.append(state.n)
        param_rows[it] = params.as_array()
        log_post[it] = current_lp
        kinds[it] = _KIND_CODES[outcome.move_kind]
        accepted[it] = outcome.accepted

    log.debug(f"Chain {chain_index} of trace {trace.trace_id}: {n_iter} iterations, final k={state.k}")
    return ChainSample(
        chain_index=chain_index,
        k=k,
        k_t=k_t,
        locations=locations,
        counts=counts,
        params=param_rows,
        log_posterior=log_post,
        move_kinds=kinds,
        accepted=accepted,
        gibbs_accepted=gibbs_accepted,
        final_state=state,
        final_params=params,
        rng_state=rng.bit_generator.state,
    )


def continue_chain(
    trace: Trace,
    dist: ProposalDistribution,
    hyper: Hyperparams,
    sample: ChainSample,
    config: ChainConfig,
    n_iter: int,
) -> ChainSample:
    """Extends a chain from its last state and random stream position."""
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = sample.rng_state
    later = run_chain(
        trace,
        dist,
        hyper,
        sample.final_params,
        config,
        rng=rng,
        n_iter=n_iter,
        state_init=sample.final_state,
        chain_index=sample.chain_index,
    )
    return sample.concat(later)


def _chain_task(task: tuple) -> ChainSample:
    trace, dist, hyper, config, index, n_iter, previous = task
    if previous is not None:
        return continue_chain(trace, dist, hyper, previous, config, n_iter)
    params = initial_params(hyper)
    rng = make_rng(config.seed, trace.trace_id, index)
    return run_chain(trace, dist, hyper, params, config, rng=rng, n_iter=n_iter, chain_index=index)


def _map_tasks(tasks: list[tuple], workers: int) -> list[ChainSample]:
    if workers > 1 and len(tasks) > 1:
        with Pool(processes=min(workers, len(tasks))) as pool:
            return pool.map(_chain_task, tasks)
    return [_chain_task(task) for task in tasks]


# --- Convergence ---


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    pair: Optional[tuple[int, int]]
    n_iterations: int
    modal_k: tuple[int, ...]
    psrf_k: Optional[float] = None
    psrf_locations: tuple[float, ...] = ()
    psrf_params: dict[str, float] = field(default_factory=dict)
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["psrf_k"] = _finite_or_none(self.psrf_k)
        data["psrf_locations"] = [_finite_or_none(v) for v in self.psrf_locations]
        data["psrf_params"] = {k: _finite_or_none(v) for k, v in self.psrf_params.items()}
        data["pair"] = list(self.pair) if self.pair else None
        data["modal_k"] = list(self.modal_k)
        return data


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not np.isfinite(value):
        return None
    return float(value)


def _mode(values: np.ndarray) -> int:
    return int(np.argmax(np.bincount(values)))


def _modal_locations(sample: ChainSample, start: int, modal_k: int) -> np.ndarray:
    rows = [sample.locations[i] for i in range(start, len(sample)) if sample.k[i] == modal_k]
    return np.asarray(rows, dtype=float).reshape(len(rows), modal_k)


def _check_pair(a: ChainSample, b: ChainSample, config: ChainConfig) -> dict[str, Any]:
    total = len(a)
    start = config.burn_in(total)
    threshold = config.psrf_threshold
    result: dict[str, Any] = {"passed": False, "psrf_k": None, "psrf_locations": (), "psrf_params": {}}
    if total - start < 2:
        result["reason"] = "too few post burn-in iterations"
        return result

    result["psrf_k"] = diagnostics.psrf([a.k[start:], b.k[start:]])
    if result["psrf_k"] > threshold:
        result["reason"] = f"PSRF of k {result['psrf_k']:.3g} exceeds {threshold}"
        return result

    mode_a, mode_b = _mode(a.k[start:]), _mode(b.k[start:])
    if mode_a != mode_b:
        result["reason"] = f"modal k disagrees ({mode_a} vs {mode_b})"
        return result

    locs_a = _modal_locations(a, start, mode_a)
    locs_b = _modal_locations(b, start, mode_b)
    common = min(len(locs_a), len(locs_b))
    if common < max(config.min_modal_samples, 2):
        result["reason"] = f"only {common} iterations at the modal k"
        return result
    psrf_locations = tuple(
        diagnostics.psrf([locs_a[:common, j], locs_b[:common, j]]) for j in range(mode_a)
    )
    result["psrf_locations"] = psrf_locations
    if any(v > threshold for v in psrf_locations):
        result["reason"] = "PSRF of a change-point location exceeds the threshold"
        return result

    psrf_params = {
        name: diagnostics.psrf([a.params[start:, j], b.params[start:, j]])
        for j, name in enumerate(PARAM_NAMES)
    }
    result["psrf_params"] = psrf_params
    failing = [name for name, v in psrf_params.items() if v > threshold]
    if failing:
        result["reason"] = f"PSRF of {', '.join(failing)} exceeds the threshold"
        return result

    result["passed"] = True
    result["reason"] = "converged"
    return result


def check_convergence(chains: Sequence[ChainSample], config: ChainConfig) -> ConvergenceReport:
    """
    Block convergence test over chain pairs.

    For each pair: the PSRF of k must pass; both chains must share the modal
    k; iterations at the modal k are truncated to the common count and the
    PSRF of every location coordinate must pass; finally the PSRF of each
    intensity parameter must pass. The chains are converged when any pair
    passes every block.

    Raises:
        ConvergenceError: With fewer than two chains or unequal lengths.
    """
    if len(chains) < 2:
        raise ConvergenceError("Convergence testing needs at least two chains.")
    lengths = {len(c) for c in chains}
    if len(lengths) != 1:
        raise ConvergenceError(f"Chains have unequal lengths: {sorted(lengths)}")
    total = lengths.pop()
    start = config.burn_in(total)
    modal = tuple(_mode(c.k[start:]) if total - start > 0 else 0 for c in chains)

    first_result = None
    for i, j in itertools.combinations(range(len(chains)), 2):
        result = _check_pair(chains[i], chains[j], config)
        first_result = first_result or result
        if result["passed"]:
            return ConvergenceReport(
                converged=True,
                pair=(i, j),
                n_iterations=total,
                modal_k=modal,
                psrf_k=result["psrf_k"],
                psrf_locations=result["psrf_locations"],
                psrf_params=result["psrf_params"],
                reason=result["reason"],
            )
    return ConvergenceReport(
        converged=False,
        pair=None,
        n_iterations=total,
        modal_k=modal,
        psrf_k=first_result["psrf_k"],
        psrf_locations=first_result["psrf_locations"],
        psrf_params=first_result["psrf_params"],
        reason=first_result["reason"],
    )


# --- Summary ---


@dataclass(frozen=True)
class PosteriorSummary:
    trace_id: str
    converged: bool
    n_iterations: int
    modal_k: int
    modal_k_t: int
    k_distribution: dict[int, float]
    locations: tuple[float, ...]
    param_means: dict[str, float]
    param_intervals: dict[str, tuple[float, float]]
    frame_counts: tuple[int, ...]
    predicted_intensity: tuple[float, ...]
    acceptance: dict[str, dict[str, float]]
    diagnostics: tuple[dict[str, Any], ...]
    location_density: tuple[float, ...]
    convergence: ConvergenceReport

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "modal_k": self.modal_k,
            "modal_k_t": self.modal_k_t,
            "k_distribution": {str(k): v for k, v in self.k_distribution.items()},
            "locations": list(self.locations),
            "param_means": dict(self.param_means),
            "param_intervals": {k: list(v) for k, v in self.param_intervals.items()},
            "frame_counts": list(self.frame_counts),
            "predicted_intensity": list(self.predicted_intensity),
            "acceptance": self.acceptance,
            "diagnostics": [
                {k: (_finite_or_none(v) if isinstance(v, float) else v) for k, v in row.items()}
                for row in self.diagnostics
            ],
            "location_density": list(self.location_density),
            "convergence": self.convergence.to_dict(),
        }


def location_density(
    trace: Trace, location_samples: np.ndarray, bandwidth_frames: float = LOCATION_BANDWIDTH_FRAMES
) -> np.ndarray:
    """Gaussian kernel density of change-point locations at the frame midpoints.

    `location_samples` has one row per retained iteration; the density is the
    per-iteration average, so it integrates to the number of change points.
    """
    samples = np.asarray(location_samples, dtype=float)
    if samples.size == 0:
        return np.zeros(trace.N)
    points = samples.ravel()
    sd = bandwidth_frames * trace.frame_width
    density = stats.norm.pdf(trace.times[:, None], loc=points[None, :], scale=sd).sum(axis=1)
    return density / samples.shape[0]


def _diagnostic_row(name: str, sequences: list[np.ndarray]) -> dict[str, Any]:
    usable = [s for s in sequences if s.size >= 2]
    row: dict[str, Any] = {"parameter": name, "mcse": None, "ess": None, "psrf": None}
    if not usable:
        return row
    pooled = np.concatenate(usable)
    ess_total = sum(diagnostics.ess(s) for s in usable)
    row["ess"] = float(ess_total)
    row["mcse"] = float(np.std(pooled, ddof=1) / math.sqrt(ess_total)) if pooled.size > 1 else None
    if len(usable) >= 2:
        common = min(s.size for s in usable)
        row["psrf"] = diagnostics.psrf([s[:common] for s in usable])
    return row


def summarize(
    trace: Trace,
    dist: ProposalDistribution,
    hyper: Hyperparams,
    chains: Sequence[ChainSample],
    report: ConvergenceReport,
    config: ChainConfig,
) -> PosteriorSummary:
    """Posterior summary from the post burn-in samples of the converged pair (all chains otherwise)."""
    used = [chains[i] for i in report.pair] if report.pair else list(chains)
    total = len(used[0])
    start = config.burn_in(total)
    if total - start < 1:
        raise ConvergenceError("No post burn-in iterations to summarise.")

    k_all = np.concatenate([c.k[start:] for c in used])
    kt_all = np.concatenate([c.k_t[start:] for c in used])
    params_all = np.concatenate([c.params[start:] for c in used])
    modal_k = _mode(k_all)
    freq = np.bincount(k_all) / k_all.size
    k_distribution = {int(k): float(p) for k, p in enumerate(freq) if p > 0}
    modal_k_t = _mode(kt_all[k_all == modal_k])

    means = params_all.mean(axis=0)
    lo, hi = np.percentile(params_all, [50 * (1 - CREDIBLE_MASS), 100 - 50 * (1 - CREDIBLE_MASS)], axis=0)
    mean_params = IntensityParams(*means.tolist())

    modal_rows = [_modal_locations(c, start, modal_k) for c in used]
    modal_locs = np.concatenate(modal_rows) if modal_k > 0 else np.empty((0, 0))
    state = _summary_state(trace, dist, hyper, used, start, modal_k, modal_locs, mean_params)
    counts = frame_counts(trace, state)

    acceptance: dict[str, dict[str, float]] = {}
    for chain in used:
        for kind, tallies in chain.acceptance_stats(start).items():
            entry = acceptance.setdefault(kind, {"proposed": 0, "accepted": 0})
            entry["proposed"] += tallies["proposed"]
            entry["accepted"] += tallies["accepted"]
    for entry in acceptance.values():
        entry["rate"] = entry["accepted"] / entry["proposed"] if entry["proposed"] else None

    rows = [_diagnostic_row("k", [c.k[start:].astype(float) for c in used])]
    if modal_k > 0:
        rows.append(_diagnostic_row("mean_location", [r.mean(axis=1) for r in modal_rows]))
    rows.extend(_diagnostic_row(name, [c.params[start:, j] for c in used]) for j, name in enumerate(PARAM_NAMES))

    return PosteriorSummary(
        trace_id=trace.trace_id,
        converged=report.converged,
        n_iterations=total,
        modal_k=modal_k,
        modal_k_t=modal_k_t,
        k_distribution=k_distribution,
        locations=state.interior,
        param_means=dict(zip(PARAM_NAMES, means.tolist())),
        param_intervals={name: (float(lo[j]), float(hi[j])) for j, name in enumerate(PARAM_NAMES)},
        frame_counts=tuple(int(v) for v in counts),
        predicted_intensity=tuple(float(v) for v in predicted_intensity(counts, mean_params)),
        acceptance=acceptance,
        diagnostics=tuple(rows),
        location_density=tuple(float(v) for v in location_density(trace, modal_locs)),
        convergence=report,
    )


def _summary_state(
    trace: Trace,
    dist: ProposalDistribution,
    hyper: Hyperparams,
    used: Sequence[ChainSample],
    start: int,
    modal_k: int,
    modal_locs: np.ndarray,
    params: IntensityParams,
) -> ChangePointState:
    if modal_k == 0:
        return state_from_locations(trace, (0.0, trace.L), params, hyper)
    snapped = [int(dist.index_of(t)) for t in modal_locs.mean(axis=0)]
    if all(b > a for a, b in zip(snapped, snapped[1:])):
        try:
            return state_from_indices(trace, dist, snapped, params, hyper)
        except InvalidConfigurationError:
            pass
    # posterior means collapsed onto one grid point: use the best modal-k sample
    best, best_lp = None, -math.inf
    for chain in used:
        for i in range(start, len(chain)):
            if chain.k[i] == modal_k and chain.log_posterior[i] > best_lp:
                best, best_lp = chain.locations[i], chain.log_posterior[i]
    log.debug(f"Location means of trace {trace.trace_id} collide on the grid; using the MAP sample.")
    return state_from_locations(trace, (0.0, *best, trace.L), params, hyper)


# --- Full Analysis ---


def single_trace_hyperparams(
    trace: Trace, dist: ProposalDistribution, tau_frames: float = 10.0, **pool_kwargs
) -> Hyperparams:
    """Hyperparameters estimated from one trace alone."""
    estimate = estimate_trace_hyperparams(trace, dist)
    pooled = pool_hyperparams([estimate], **pool_kwargs)
    return dataclasses.replace(pooled, tau=tau_frames * trace.frame_width)


def analyze(
    trace: Trace,
    hyper: Optional[Hyperparams],
    config: Optional[ChainConfig] = None,
    dist: Optional[ProposalDistribution] = None,
    window_size: int = 10,
    base_variance: float = 10000.0,
    resolution: Optional[float] = None,
    workers: int = 1,
) -> PosteriorSummary:
    """
    Runs the full sampler on one trace and summarises the posterior.

    Chains run for config.n_iter iterations and are extended by
    config.extension until a pair converges or config.max_iter is reached;
    burn-in is recomputed against the total length each round. An
    unconverged run still yields a summary, flagged `converged=False`.

    Args:
        hyper: Pooled hyperparameters; None estimates them from this trace.
        dist: Location proposal; built from the trace when None.
        workers: Processes used to run the chains in parallel.
    """
    config = config or ChainConfig()
    if dist is None:
        dist = build_proposal(trace, window_size, base_variance, resolution)
    if hyper is None:
        log.info(f"No pooled hyperparameters for trace {trace.trace_id}; estimating from the trace alone.")
        hyper = single_trace_hyperparams(trace, dist)

    chains, report = run_sampler(trace, dist, hyper, config, workers)
    return summarize(trace, dist, hyper, chains, report, config)


def run_sampler(
    trace: Trace,
    dist: ProposalDistribution,
    hyper: Hyperparams,
    config: ChainConfig,
    workers: int = 1,
) -> tuple[list[ChainSample], ConvergenceReport]:
    """Runs and extends the chains until convergence or config.max_iter."""
    tasks = [(trace, dist, hyper, config, i, config.n_iter, None) for i in range(config.n_chains)]
    chains = _map_tasks(tasks, workers)
    report = check_convergence(chains, config)
    while not report.converged and report.n_iterations < config.max_iter:
        step = min(config.extension, config.max_iter - report.n_iterations)
        log.info(
            f"Trace {trace.trace_id}: not converged after {report.n_iterations} iterations "
            f"({report.reason}); extending by {step}."
        )
        tasks = [(trace, dist, hyper, config, c.chain_index, step, c) for c in chains]
        chains = _map_tasks(tasks, workers)
        report = check_convergence(chains, config)

    if report.converged:
        log.info(f"Trace {trace.trace_id}: converged after {report.n_iterations} iterations (chains {report.pair}).")
    else:
        log.warning(f"Trace {trace.trace_id}: reached max_iter={config.max_iter} without converging ({report.reason}).")
    return chains, report
