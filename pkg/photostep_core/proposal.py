# photostep_core/proposal.py
"""
Custom change-point location proposal built from a preliminary scan of a trace.

The trace is cut into windows; every boundary between two windows whose mean
intensities differ gets a Gaussian bump weighted by the z-score of that
difference. The bumps sit on top of a uniform floor, so every grid point keeps
positive mass. The distribution is discretised on a fixed grid and all masses
are stored for constant-time lookup.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import stats

from .exceptions import ValidationError
from .model import Trace

log = logging.getLogger(__name__)

# --- Constants ---
UNIFORM_FLOOR_MASS = 0.1
MICROSECOND = 1e-6  # trace time unit is seconds; base variance is given in µs²


@dataclass(frozen=True, eq=False)
class ProposalDistribution:
    """Location proposal over the interior grid ``resolution * {1, ..., m-1}``.

    Grid index ``i`` corresponds to time ``grid[i]``; index ``-1`` stands for
    time 0 and ``len(grid)`` for L, which keeps change-point arithmetic in
    index space simple.
    """

    grid: np.ndarray
    pmf: np.ndarray
    resolution: float
    L: float
    window_size: int
    base_variance: float

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float)
        pmf = np.array(self.pmf, dtype=float)
        if grid.size == 0 or grid.shape != pmf.shape:
            raise ValidationError("Proposal grid and pmf must be non-empty and of equal length.")
        if np.any(pmf <= 0):
            raise ValidationError("Every proposal grid point needs positive mass.")
        if abs(pmf.sum() - 1.0) > 1e-9:
            raise ValidationError(f"Proposal masses sum to {pmf.sum()}, not 1.")
        grid.flags.writeable = False
        pmf.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "pmf", pmf)

    @property
    def size(self) -> int:
        return int(self.grid.size)

    @cached_property
    def log_pmf(self) -> np.ndarray:
        return np.log(self.pmf)

    @cached_property
    def cumulative(self) -> np.ndarray:
        """``cumulative[i]`` is the mass of grid indices below ``i``."""
        cum = np.concatenate(([0.0], np.cumsum(self.pmf)))
        cum.flags.writeable = False
        return cum

    def index_of(self, t: float) -> int:
        """Nearest grid index of an interior time."""
        if not 0.0 < t < self.L:
            raise ValidationError(f"Time {t} lies outside (0, {self.L}).")
        return int(min(max(round(t / self.resolution) - 1, 0), self.size - 1))

    def indices_of(self, times) -> np.ndarray:
        """Grid indices of times already on the grid."""
        times = np.asarray(times, dtype=float)
        return (np.rint(times / self.resolution) - 1).astype(np.int64)

    def mass(self, lo: int, hi: int) -> float:
        """Total mass of grid indices ``lo <= i < hi``."""
        return float(self.cumulative[hi] - self.cumulative[lo])

    def sample_index(
        self, rng: np.random.Generator, lo: int = 0, hi: Optional[int] = None
    ) -> int:
        """Inverse-CDF draw of a grid index restricted to ``lo <= i < hi``."""
        hi = self.size if hi is None else hi
        if hi <= lo:
            raise ValidationError(f"Empty proposal range [{lo}, {hi}).")
        cum = self.cumulative
        u = cum[lo] + rng.random() * (cum[hi] - cum[lo])
        idx = int(np.searchsorted(cum, u, side="right")) - 1
        return min(max(idx, lo), hi - 1)


# --- Construction ---


def window_edges(n_frames: int, window_size: int) -> np.ndarray:
    edges = list(range(0, n_frames, window_size))
    edges.append(n_frames)
    if len(edges) > 2 and edges[-1] - edges[-2] < 2:
        # a trailing window of one frame has no usable mean difference
        edges.pop(-2)
    return np.asarray(edges, dtype=np.int64)


def _frame_boundary(trace: Trace, frame: int) -> float:
    return 0.5 * (trace.times[frame - 1] + trace.times[frame])


def _gaussian_bump(grid: np.ndarray, centre: float, sd: float) -> np.ndarray:
    bump = stats.norm.pdf(grid, loc=centre, scale=sd)
    total = bump.sum()
    if not np.isfinite(total) or total <= 0:
        # bump narrower than the grid spacing: all mass on the nearest point
        bump = np.zeros_like(grid)
        bump[int(np.argmin(np.abs(grid - centre)))] = 1.0
        return bump
    return bump / total


def window_zscores(trace: Trace, window_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Boundary frame indices between adjacent windows and their z-scores.

    ``z = |difference of window means| / std(y) * sqrt(SNR)`` with
    ``SNR = |mean(y)| / std(y)``. Both factors are scale free.
    """
    y = trace.intensities
    std = float(np.std(y))
    edges = window_edges(trace.N, window_size)
    if std == 0.0 or edges.size < 3:
        return edges[1:-1], np.zeros(max(edges.size - 2, 0))
    snr = abs(float(np.mean(y))) / std
    cum = trace.cumulative
    means = (cum[edges[1:]] - cum[edges[:-1]]) / np.diff(edges)
    z = np.abs(np.diff(means)) / std * math.sqrt(snr)
    return edges[1:-1], z


def build_proposal(
    trace: Trace,
    window_size: int = 10,
    base_variance: float = 10000.0,
    resolution: Optional[float] = None,
    time_unit: float = MICROSECOND,
) -> ProposalDistribution:
    """
    Builds the location proposal for a trace.

    Args:
        trace: The observed trace.
        window_size: Frames per window (>= 2).
        base_variance: Bump variance in squared `time_unit`s (µs² by default).
        resolution: Grid spacing in trace time units; None means one grid
                    point per interior frame boundary.
        time_unit: Trace time units per unit of `base_variance`'s square root.

    Returns:
        A ProposalDistribution. Traces without any window contrast (for example
        a constant trace) get the pure uniform distribution.
    """
    if window_size < 2:
        raise ValidationError(f"window_size must be at least 2, got {window_size}.")
    if base_variance <= 0:
        raise ValidationError(f"base_variance must be positive, got {base_variance}.")
    resolution = trace.frame_width if resolution is None else float(resolution)
    if resolution <= 0:
        raise ValidationError(f"resolution must be positive, got {resolution}.")
    m = int(round(trace.L / resolution))
    if m < 2:
        raise ValidationError(f"Resolution {resolution} leaves no interior grid point in (0, {trace.L}).")
    grid = resolution * np.arange(1, m)
    uniform = np.full(grid.size, 1.0 / grid.size)

    boundaries, z = window_zscores(trace, window_size)
    if z.size == 0 or not np.any(z > 0):
        log.debug(f"No window contrast in trace {trace.trace_id}; using a uniform proposal.")
        return ProposalDistribution(grid, uniform, resolution, trace.L, window_size, base_variance)

    sd = math.sqrt(base_variance) * time_unit
    bumps = np.zeros(grid.size)
    for frame, weight in zip(boundaries, z):
        if weight > 0:
            bumps += weight * _gaussian_bump(grid, _frame_boundary(trace, int(frame)), sd)
    pmf = UNIFORM_FLOOR_MASS * uniform + (1.0 - UNIFORM_FLOOR_MASS) * bumps / bumps.sum()
    pmf /= pmf.sum()
    log.debug(
        f"Built proposal for trace {trace.trace_id}: {grid.size} grid points, "
        f"{int(np.count_nonzero(z))} weighted window boundaries."
    )
    return ProposalDistribution(grid, pmf, resolution, trace.L, window_size, base_variance)


# --- Queries ---


def sample_location(dist: ProposalDistribution, rng: np.random.Generator) -> float:
    """Draws a grid time from the proposal."""
    return float(dist.grid[dist.sample_index(rng)])


def pmf_at(dist: ProposalDistribution, t: float) -> float:
    """Stored mass of the grid point nearest to t."""
    return float(dist.pmf[dist.index_of(t)])
