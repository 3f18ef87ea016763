# photostep_core/api.py
"""
Public API Facade for the photostep_core library.

This module provides the primary interface for external callers (like the CLI)
to the batch workflows of photostep: simulating trace pools, estimating and
pooling intensity hyperparameters, analysing traces with parallel chains and
scoring the results against ground truth. Every workflow writes a run
manifest next to its outputs.
"""
from __future__ import annotations

import configparser
import dataclasses
import itertools
import logging
import os
import pathlib
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from multiprocessing import Pool
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from . import config as cfg
from . import exceptions as exc
from . import gibbs, helpers, metrics, sampler, simulator
from .model import Hyperparams, Trace
from .proposal import ProposalDistribution, build_proposal

log = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

# --- Constants ---
SUMMARY_SUFFIX = ".summary.json"
TRUTH_SUFFIX = ".truth.json"
SAMPLES_SUFFIX = ".samples.csv"
MANIFEST_NAME = "manifest.json"
DEFAULT_REPLICATES = 10
DEFAULT_SIM_GRID: dict[str, Any] = {
    "mu_f": [500.0, 1000.0, 2000.0],
    "snr": [0.01, 0.1, 1.0],
    "fluorophores": [1, 2, 3, 4],
    "replicates": DEFAULT_REPLICATES,
}
_GRID_ALIASES = {"fluorophores": "n_fluorophores", "mu_f": "mu_f_photons"}
_SIM_FIELDS = {f.name for f in dataclasses.fields(simulator.SimConfig)} - {"seed"}


def default_workers() -> int:
    return os.cpu_count() or 1


# --- Settings ---


@dataclass(frozen=True)
class Settings:
    """Everything a workflow reads from the configuration file."""

    window_size: int
    base_variance: float
    resolution: Optional[float]
    priors: dict[str, float]
    tau_frames: float
    nu_f_scale: float
    nu_b_scale: float
    intensity_floor: Optional[float]
    floor_multiplier: float
    weighting: str
    chain: sampler.ChainConfig
    snapshot: dict[str, dict[str, str]] = field(default_factory=dict)

    def prior_fields(self, frame_width: float) -> dict[str, Any]:
        """Hyperparams fields that come from configuration rather than data."""
        return {**self.priors, "tau": self.tau_frames * frame_width}


def _snapshot(parser: configparser.ConfigParser) -> dict[str, dict[str, str]]:
    return {section: dict(parser.items(section)) for section in parser.sections()}


def load_settings(
    config_file: Optional[PathLike] = None,
    seed: Optional[int] = None,
    max_iter: Optional[int] = None,
    psrf_threshold: Optional[float] = None,
) -> Settings:
    """
    Loads configuration (defaults, INI file, environment) and applies CLI overrides.

    Raises:
        ConfigError: If the file cannot be read or a value is invalid.
    """
    mgr = cfg.ConfigManager(pathlib.Path(config_file) if config_file else None)
    parser = mgr.load_config()
    if seed is not None:
        mgr.set_setting(parser, "Sampler", "seed", str(seed))
    if max_iter is not None:
        mgr.set_setting(parser, "Sampler", "max_iter", str(max_iter))
    if psrf_threshold is not None:
        mgr.set_setting(parser, "Sampler", "psrf_threshold", str(psrf_threshold))

    def f(section: str, key: str) -> float:
        value = mgr.get_float(parser, section, key)
        if value is None:
            raise exc.ConfigError(f"[{section}] {key}: a value is required")
        return value

    def i(section: str, key: str) -> int:
        return mgr.get_int(parser, section, key)

    try:
        max_iter_value = i("Sampler", "max_iter")
        chain = sampler.ChainConfig(
            n_iter=min(i("Sampler", "n_iter"), max_iter_value),
            burn_in_fraction=f("Sampler", "burn_in_fraction"),
            extension=i("Sampler", "extension"),
            max_iter=max_iter_value,
            n_chains=i("Sampler", "n_chains"),
            psrf_threshold=f("Sampler", "psrf_threshold"),
            seed=i("Sampler", "seed"),
            min_modal_samples=i("Sampler", "min_modal_samples"),
            update_intensity=mgr.get_bool(parser, "Sampler", "update_intensity"),
        )
        priors = {
            "lam": f("Priors", "lambda"),
            "lam_t": f("Priors", "lambda_t"),
            "k_max": i("Priors", "k_max"),
            "p_accept": f("Priors", "p_accept"),
            "c": f("Priors", "c"),
            "gamma": f("Priors", "gamma"),
            "proposal_scale_f": f("Gibbs", "proposal_scale_f"),
            "proposal_scale_b": f("Gibbs", "proposal_scale_b"),
            "variance_proposal_scale": f("Gibbs", "variance_proposal_scale"),
        }
        weighting = mgr.get_setting(parser, "Hyperparams", "weighting", "homogeneous").strip()
        if weighting not in gibbs.WEIGHTING_SCHEMES:
            raise exc.ConfigError(
                f"[Hyperparams] weighting: expected one of {gibbs.WEIGHTING_SCHEMES}, got '{weighting}'"
            )
        settings = Settings(
            window_size=i("Proposal", "window_size"),
            base_variance=f("Proposal", "base_variance"),
            resolution=mgr.get_float(parser, "Proposal", "resolution"),
            priors=priors,
            tau_frames=f("Priors", "tau_frames"),
            nu_f_scale=f("Priors", "nu_f_scale"),
            nu_b_scale=f("Priors", "nu_b_scale"),
            intensity_floor=mgr.get_float(parser, "Hyperparams", "intensity_floor"),
            floor_multiplier=f("Hyperparams", "floor_multiplier"),
            weighting=weighting,
            chain=chain,
            snapshot=_snapshot(parser),
        )
    except exc.ValidationError as e:
        raise exc.ConfigError(f"Invalid sampler settings in {mgr.config_file}: {e}") from e
    return settings


# --- Run Manifest ---


@dataclass
class RunManifest:
    """Record of one command run: enough to rerun it and get the same outputs."""

    command: str
    arguments: dict[str, Any]
    config: dict[str, dict[str, str]]
    seed: Optional[int]
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    versions: dict[str, str] = field(default_factory=helpers.package_versions)
    timings: dict[str, float] = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def write(self, path: PathLike) -> pathlib.Path:
        return helpers.write_json(path, self.to_dict())


def _manifest_path(out: pathlib.Path) -> pathlib.Path:
    if out.suffix:
        return out.with_suffix(".manifest.json")
    return out / MANIFEST_NAME


# --- Simulation ---


def _grid_values(key: str, value: Any) -> list[Any]:
    if isinstance(value, str) and ".." in value:
        lo, hi = value.split("..", 1)
        try:
            return list(range(int(lo), int(hi) + 1))
        except ValueError as e:
            raise exc.ConfigError(f"Grid entry '{key}': invalid range '{value}'") from e
    return list(value) if isinstance(value, list) else [value]


def expand_sim_grid(grid: dict[str, Any]) -> tuple[list[dict[str, Any]], int]:
    """
    Cartesian product of a simulation grid.

    Keys are SimConfig fields (or the aliases 'fluorophores' and 'mu_f');
    values are scalars, lists or integer ranges written 'a..b'. 'replicates'
    gives the number of traces per combination.

    Returns:
        The list of SimConfig keyword dicts and the replicate count.
    """
    grid = dict(grid)
    replicates = grid.pop("replicates", DEFAULT_REPLICATES)
    if not isinstance(replicates, int) or replicates < 1:
        raise exc.ConfigError(f"Grid entry 'replicates' must be a positive integer, got {replicates!r}")
    axes: dict[str, list[Any]] = {}
    for key in sorted(grid):
        name = _GRID_ALIASES.get(key, key)
        if name not in _SIM_FIELDS:
            raise exc.ConfigError(f"Unknown simulation grid entry '{key}'")
        if name in axes:
            raise exc.ConfigError(f"Simulation grid entry '{key}' given twice")
        axes[name] = _grid_values(key, grid[key])
    names = list(axes)
    combos = [dict(zip(names, values)) for values in itertools.product(*(axes[n] for n in names))]
    return combos, replicates


def group_label(sim: simulator.SimConfig) -> str:
    """Experiment group shared by traces with the same intensity and SNR."""
    snr = "none" if sim.snr is None else f"{sim.snr:g}"
    return f"mu{sim.mu_f_photons:g}_snr{snr}"


def simulate_pool(
    out_dir: PathLike,
    grid: Optional[dict[str, Any]] = None,
    grid_path: Optional[PathLike] = None,
    seed: int = 0,
    arguments: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    """
    API Facade: Simulates every trace of a grid and writes CSV + ground truth.

    Traces are named `<group>_<index>` where the group is the intensity/SNR
    label and the index runs over all traces of that group. Each trace draws
    from its own stream keyed by (seed, group, index).
    """
    t0 = time.perf_counter()
    if grid_path is not None:
        grid = helpers.read_json(grid_path)
        if not isinstance(grid, dict):
            raise exc.ConfigError(f"{grid_path}: a simulation grid must be a JSON object")
    grid = DEFAULT_SIM_GRID if grid is None else grid
    combos, replicates = expand_sim_grid(grid)
    log.info(f"API: Simulating {len(combos) * replicates} traces into {out_dir}")

    out = pathlib.Path(out_dir)
    manifest = RunManifest(
        command="simulate",
        arguments={**(arguments or {}), "grid": grid},
        config={},
        seed=seed,
        inputs=[str(grid_path)] if grid_path else [],
    )
    counters: dict[str, int] = {}
    written = []
    for combo in combos:
        try:
            sim = simulator.SimConfig(**combo, seed=seed)
        except (exc.ValidationError, TypeError) as e:
            raise exc.ConfigError(f"Invalid simulation settings {combo}: {e}") from e
        group = group_label(sim)
        for _ in range(replicates):
            index = counters.get(group, 0)
            counters[group] = index + 1
            trace_id = f"{group}_{index:04d}"
            rng = helpers.make_rng(seed, group, index)
            trace, truth = simulator.simulate_trace(sim, rng, trace_id=trace_id)
            csv_path = helpers.write_trace_csv(trace, out / f"{trace_id}.csv")
            truth_path = helpers.write_json(out / f"{trace_id}{TRUTH_SUFFIX}", truth.to_dict())
            written.extend([str(csv_path), str(truth_path)])
    manifest.outputs = written
    manifest.timings["total_s"] = time.perf_counter() - t0
    manifest_file = manifest.write(out / MANIFEST_NAME)
    log.info(f"API: Wrote {len(written) // 2} traces and {manifest_file}")
    return {"n_traces": len(written) // 2, "groups": dict(sorted(counters.items())), "manifest": str(manifest_file)}


# --- Hyperparameters ---


def trace_group(trace_id: str) -> str:
    """Group key of a trace id: everything before the last underscore."""
    return trace_id.rsplit("_", 1)[0] if "_" in trace_id else trace_id


def _read_traces(pattern: PathLike) -> list[tuple[pathlib.Path, Trace]]:
    paths = helpers.expand_paths(pattern)
    if not paths:
        raise exc.ValidationError(f"No trace files match '{pattern}'")
    return [(p, helpers.read_trace_csv(p)) for p in paths]


def _estimate(trace: Trace, dist: ProposalDistribution, settings: Settings) -> gibbs.TraceHyperEstimate:
    return gibbs.estimate_trace_hyperparams(
        trace,
        dist,
        intensity_floor=settings.intensity_floor,
        floor_multiplier=settings.floor_multiplier,
        weighting=settings.weighting,
    )


def _pool(estimates: list[gibbs.TraceHyperEstimate], frame_width: float, settings: Settings) -> Hyperparams:
    pooled = gibbs.pool_hyperparams(estimates, scaling_f=settings.nu_f_scale, scaling_b=settings.nu_b_scale)
    return dataclasses.replace(pooled, **settings.prior_fields(frame_width))


def _build_proposal(trace: Trace, settings: Settings) -> ProposalDistribution:
    return build_proposal(trace, settings.window_size, settings.base_variance, settings.resolution)


def estimate_hyperparams(
    traces_glob: PathLike,
    out_path: PathLike,
    settings: Settings,
    tag: Optional[str] = None,
    arguments: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    """
    API Facade: Estimates per-trace hyperparameters and pools them per group.

    Groups come from the trace ids (see `trace_group`) unless `tag` puts every
    trace into one group. The output document has `groups` (pooled
    Hyperparams per group), `members` (trace id -> group) and `estimates`.
    """
    t0 = time.perf_counter()
    log.info(f"API: Estimating hyperparameters for '{traces_glob}'")
    traces = _read_traces(traces_glob)
    by_group: dict[str, list[tuple[Trace, gibbs.TraceHyperEstimate]]] = {}
    for _, trace in traces:
        estimate = _estimate(trace, _build_proposal(trace, settings), settings)
        by_group.setdefault(tag or trace_group(trace.trace_id), []).append((trace, estimate))

    groups, members, estimates = {}, {}, {}
    for group, entries in sorted(by_group.items()):
        frame_width = float(np.median([t.frame_width for t, _ in entries]))
        hyper = _pool([e for _, e in entries], frame_width, settings)
        groups[group] = hyper.to_dict()
        for trace, estimate in entries:
            members[trace.trace_id] = group
            estimates[trace.trace_id] = dataclasses.asdict(estimate)
        low = sum(e.low_confidence for _, e in entries)
        log.info(f"API: Group {group}: pooled {len(entries)} traces, eta_f={hyper.eta_f:.4g} ({low} low confidence)")

    doc = {"groups": groups, "members": members, "estimates": estimates}
    out = helpers.write_json(out_path, doc)
    manifest = RunManifest(
        command="hyperparams",
        arguments={**(arguments or {}), "tag": tag},
        config=settings.snapshot,
        seed=None,
        inputs=[str(p) for p, _ in traces],
        outputs=[str(out)],
        timings={"total_s": time.perf_counter() - t0},
    )
    manifest_file = manifest.write(_manifest_path(out))
    return {"groups": sorted(groups), "n_traces": len(traces), "output": str(out), "manifest": str(manifest_file)}


def load_hyperparams(path: PathLike) -> dict[str, Any]:
    """Loads a pooled hyperparameters document.

    Raises:
        ConfigError: If the file is missing, malformed or has no groups.
    """
    doc = helpers.read_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("groups"), dict) or not doc["groups"]:
        raise exc.ConfigError(f"{path}: expected a hyperparameters document with a non-empty 'groups' object")
    try:
        groups = {name: Hyperparams.from_dict(values) for name, values in doc["groups"].items()}
    except exc.ValidationError as e:
        raise exc.ConfigError(f"{path}: {e}") from e
    return {"groups": groups, "members": dict(doc.get("members", {}))}


def hyper_for_trace(trace_id: str, doc: dict[str, Any]) -> Hyperparams:
    """Pooled hyperparameters for a trace: by membership, then the only group, then the id prefix."""
    groups, members = doc["groups"], doc["members"]
    if trace_id in members and members[trace_id] in groups:
        return groups[members[trace_id]]
    if len(groups) == 1:
        return next(iter(groups.values()))
    group = trace_group(trace_id)
    if group in groups:
        return groups[group]
    raise exc.ConfigError(f"No hyperparameter group matches trace '{trace_id}'")


# --- Analysis ---


def _analyze_task(task: tuple) -> dict[str, Any]:
    path, trace, hyper, settings, chain_workers, out_dir, write_samples = task
    t0 = time.perf_counter()
    dist = _build_proposal(trace, settings)
    if hyper is None:
        log.info(f"No hyperparameters for trace {trace.trace_id}; estimating from the trace alone.")
        hyper = _pool([_estimate(trace, dist, settings)], trace.frame_width, settings)
    chains, report = sampler.run_sampler(trace, dist, hyper, settings.chain, chain_workers)
    summary = sampler.summarize(trace, dist, hyper, chains, report, settings.chain)
    out = pathlib.Path(out_dir)
    outputs = [str(helpers.write_json(out / f"{trace.trace_id}{SUMMARY_SUFFIX}", summary.to_dict()))]
    if write_samples:
        frame = pd.concat([c.to_frame() for c in chains], ignore_index=True)
        samples_path = out / f"{trace.trace_id}{SAMPLES_SUFFIX}"
        frame.to_csv(samples_path, index=False, float_format="%.10g")
        outputs.append(str(samples_path))
    return {
        "trace_id": trace.trace_id,
        "input": str(path),
        "outputs": outputs,
        "converged": summary.converged,
        "modal_k": summary.modal_k,
        "n_iterations": summary.n_iterations,
        "seconds": time.perf_counter() - t0,
    }


def analyze_traces(
    traces_glob: PathLike,
    out_dir: PathLike,
    settings: Settings,
    hyper_path: Optional[PathLike] = None,
    workers: Optional[int] = None,
    write_samples: bool = False,
    arguments: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    """
    API Facade: Runs the sampler on every matching trace and writes summaries.

    With at least as many traces as workers, traces run in parallel and each
    trace's chains run serially; otherwise traces run one after the other and
    their chains use the workers. Outputs do not depend on the split.

    Args:
        hyper_path: Pooled hyperparameters; None estimates them per trace.
        write_samples: Also write every iteration of every chain to CSV.
    """
    t0 = time.perf_counter()
    workers = workers or default_workers()
    log.info(f"API: Analysing '{traces_glob}' with {workers} worker(s)")
    doc = load_hyperparams(hyper_path) if hyper_path is not None else None
    traces = _read_traces(traces_glob)
    by_trace = len(traces) >= workers > 1
    chain_workers = 1 if by_trace else workers

    tasks = []
    for path, trace in traces:
        hyper = hyper_for_trace(trace.trace_id, doc) if doc else None
        tasks.append((path, trace, hyper, settings, chain_workers, str(out_dir), write_samples))
    if by_trace:
        with Pool(processes=workers) as pool:
            results = pool.map(_analyze_task, tasks)
    else:
        results = [_analyze_task(task) for task in tasks]

    converged = sum(r["converged"] for r in results)
    if converged < len(results):
        log.warning(f"{len(results) - converged} of {len(results)} traces did not converge.")
    manifest = RunManifest(
        command="analyze",
        arguments={**(arguments or {}), "workers": workers, "samples": write_samples},
        config=settings.snapshot,
        seed=settings.chain.seed,
        inputs=[str(p) for p, _ in traces] + ([str(hyper_path)] if hyper_path else []),
        outputs=[o for r in results for o in r["outputs"]],
        timings={**{r["trace_id"]: r["seconds"] for r in results}, "total_s": time.perf_counter() - t0},
    )
    manifest_file = manifest.write(pathlib.Path(out_dir) / MANIFEST_NAME)
    return {
        "n_traces": len(results),
        "n_converged": converged,
        "traces": [{k: r[k] for k in ("trace_id", "converged", "modal_k", "n_iterations")} for r in results],
        "manifest": str(manifest_file),
    }


# --- Metrics ---


def _documents(directory: pathlib.Path, suffix: str) -> dict[str, pathlib.Path]:
    return {p.name[: -len(suffix)]: p for p in sorted(directory.glob(f"*{suffix}"))}


def compute_metrics(
    estimates_dir: PathLike,
    truth_dir: PathLike,
    out_csv: PathLike,
    arguments: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    """
    API Facade: Scores posterior summaries against ground truth.

    Estimates are the `*.summary.json` files of `estimates_dir`; when there
    are none its `*.truth.json` files are used instead. Trace ids must match
    one to one.

    Raises:
        ValidationError: On orphan trace ids or when nothing matches.
    """
    t0 = time.perf_counter()
    log.info(f"API: Computing metrics for {estimates_dir} against {truth_dir}")
    est_files = _documents(pathlib.Path(estimates_dir), SUMMARY_SUFFIX)
    if not est_files:
        est_files = _documents(pathlib.Path(estimates_dir), TRUTH_SUFFIX)
    truth_files = _documents(pathlib.Path(truth_dir), TRUTH_SUFFIX)
    if not est_files or not truth_files:
        raise exc.ValidationError(f"No estimates in {estimates_dir} or no ground truth in {truth_dir}")
    orphans = sorted(set(est_files) ^ set(truth_files))
    if orphans:
        raise exc.ValidationError(f"Trace ids without a counterpart: {', '.join(orphans)}")

    rows = []
    for trace_id in sorted(truth_files):
        truth_doc = helpers.read_json(truth_files[trace_id])
        est_doc = helpers.read_json(est_files[trace_id])
        truth = metrics.TraceEstimate.from_document(trace_id, truth_doc)
        estimate = metrics.TraceEstimate.from_document(trace_id, est_doc)
        rows.append(metrics.trace_metrics(truth, estimate))
    table = metrics.metrics_table(rows)
    out = pathlib.Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(table, out)
    aggregate = metrics.aggregate_metrics(table)

    manifest = RunManifest(
        command="metrics",
        arguments=arguments or {},
        config={},
        seed=None,
        inputs=[str(p) for p in [*est_files.values(), *truth_files.values()]],
        outputs=[str(out)],
        timings={"total_s": time.perf_counter() - t0},
    )
    manifest_file = manifest.write(_manifest_path(out))
    log.info(f"API: Wrote metrics for {len(table)} traces to {out}")
    return {
        "n_traces": len(table),
        "mean": {k: metrics.finite_or_none(v) for k, v in aggregate.loc["mean"].items()},
        "ci95": {k: metrics.finite_or_none(v) for k, v in aggregate.loc["ci95"].items()},
        "output": str(out),
        "manifest": str(manifest_file),
    }
