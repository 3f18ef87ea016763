# photostep_core/simulator.py
"""
Ground-truth trace simulator.

Each fluorophore follows a discrete-time Markov chain over four states:
A (bright), B (blink), D (dark) and P (photobleached, absorbing), with one
step per frame. Active fluorophores emit Poisson photons; every frame also
receives background made of a Poisson and a Gaussian component with equal
mean and variance. The expected background is subtracted afterwards, and the
trace stops a random number of frames after the last photobleach.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Optional

import numpy as np

from .exceptions import ValidationError
from .model import DEFAULT_FRAME_WIDTH, Trace

log = logging.getLogger(__name__)

# --- Constants ---
STATES = ("A", "B", "D", "P")
BRIGHT, BLINK, DARK, BLEACHED = range(4)
SNR_DEFINITIONS = ("mean", "std")
MAX_FRAMES = 1_000_000


@dataclass(frozen=True, eq=False)
class FluorophoreModel:
    """Row-stochastic 4x4 transition matrix over (A, B, D, P)."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValidationError(f"Transition matrix must be 4x4, got {matrix.shape}.")
        if np.any(matrix < 0):
            raise ValidationError("Transition probabilities must be non-negative.")
        if not np.allclose(matrix.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValidationError(f"Transition matrix rows must sum to 1: {matrix.sum(axis=1)}")
        if matrix[BLEACHED, BLEACHED] != 1.0:
            raise ValidationError("The photobleached state must be absorbing.")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)

    @cached_property
    def cumulative(self) -> np.ndarray:
        cum = np.cumsum(self.matrix, axis=1)
        cum[:, -1] = 1.0
        return cum


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``snr`` sets the background: with ``snr_definition='mean'`` the single
    fluorophore intensity over the mean background equals ``snr``; with
    ``'std'`` it is over the background standard deviation. ``snr=None``
    disables the background.
    """

    n_fluorophores: int = 1
    mu_f_photons: float = 1000.0
    snr: Optional[float] = 1.0
    dur_blink: float = 10.0
    dur_dark: float = 50.0
    p_AB: float = 0.0002
    p_AD: float = 0.0002
    p_AP: float = 0.0005
    bin_width: float = DEFAULT_FRAME_WIDTH
    extension_min: int = 5
    extension_max: int = 50
    p_start_dark: float = 0.0
    snr_definition: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.n_fluorophores < 1:
            raise ValidationError(f"n_fluorophores must be at least 1, got {self.n_fluorophores}.")
        if self.mu_f_photons <= 0:
            raise ValidationError(f"mu_f_photons must be positive, got {self.mu_f_photons}.")
        if self.snr is not None and self.snr <= 0:
            raise ValidationError(f"snr must be positive, got {self.snr}.")
        if self.dur_blink < 1 or self.dur_dark < 1:
            raise ValidationError("Blink and dark durations must be at least one frame.")
        if min(self.p_AB, self.p_AD, self.p_AP) < 0 or self.p_AB + self.p_AD + self.p_AP > 1:
            raise ValidationError("p_AB, p_AD, p_AP must be non-negative with a sum of at most 1.")
        if self.p_AP == 0:
            raise ValidationError("p_AP must be positive so every fluorophore eventually photobleaches.")
        if not 1 <= self.extension_min <= self.extension_max:
            raise ValidationError("Need 1 <= extension_min <= extension_max.")
        if not 0 <= self.p_start_dark <= 1:
            raise ValidationError(f"p_start_dark must lie in [0, 1], got {self.p_start_dark}.")
        if self.snr_definition not in SNR_DEFINITIONS:
            raise ValidationError(f"snr_definition must be one of {SNR_DEFINITIONS}.")
        if self.bin_width <= 0:
            raise ValidationError(f"bin_width must be positive, got {self.bin_width}.")

    @property
    def background_mean(self) -> float:
        """Mean of each background component (Poisson and Gaussian)."""
        if self.snr is None:
            return 0.0
        if self.snr_definition == "mean":
            return self.mu_f_photons / self.snr / 2.0
        return (self.mu_f_photons / self.snr) ** 2 / 2.0


@dataclass(frozen=True)
class GroundTruth:
    counts: tuple[int, ...]
    change_points: tuple[float, ...]
    mu_f: float
    mu_b: float
    sigma_f2: float
    sigma_b2: float
    n_fluorophores: int = 1

    @property
    def intensity(self) -> np.ndarray:
        """Noise-free intensity trace."""
        return self.mu_f * np.asarray(self.counts, dtype=float) + self.mu_b

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["counts"] = list(self.counts)
        data["change_points"] = list(self.change_points)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GroundTruth:
        try:
            return cls(
                counts=tuple(int(v) for v in data["counts"]),
                change_points=tuple(float(v) for v in data.get("change_points", ())),
                mu_f=float(data["mu_f"]),
                mu_b=float(data["mu_b"]),
                sigma_f2=float(data["sigma_f2"]),
                sigma_b2=float(data["sigma_b2"]),
                n_fluorophores=int(data.get("n_fluorophores", 1)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Malformed ground truth document: {e}") from e


# --- Markov Chain ---


def build_transition_matrix(cfg: SimConfig) -> FluorophoreModel:
    """Transition matrix with blink and dark dwell times set by their durations."""
    p_bb = 1.0 - 1.0 / cfg.dur_blink
    p_dd = 1.0 - 1.0 / cfg.dur_dark
    p_aa = 1.0 - cfg.p_AB - cfg.p_AD - cfg.p_AP
    matrix = np.array(
        [
            [p_aa, cfg.p_AB, cfg.p_AD, cfg.p_AP],
            [1.0 - p_bb, p_bb, 0.0, 0.0],
            [1.0 - p_dd, 0.0, p_dd, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return FluorophoreModel(matrix)


def step_states(model: FluorophoreModel, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Advances every chain in `states` by one step."""
    u = rng.random(states.shape)
    nxt = (model.cumulative[states] <= u[..., None]).sum(axis=-1)
    return np.minimum(nxt, BLEACHED)


def initial_states(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """All bright, or dark with probability p_start_dark."""
    states = np.full(cfg.n_fluorophores, BRIGHT, dtype=np.int64)
    if cfg.p_start_dark > 0:
        states[rng.random(cfg.n_fluorophores) < cfg.p_start_dark] = DARK
    return states


def simulate_state_paths(
    model: FluorophoreModel, start: np.ndarray, rng: np.random.Generator, max_frames: int = MAX_FRAMES
) -> np.ndarray:
    """
    Simulates fluorophore state paths until every one is photobleached.

    Returns:
        Array of shape (n_fluorophores, T) whose last column is the first frame
        in which all fluorophores are bleached.
    """
    states = np.asarray(start, dtype=np.int64).copy()
    path = [states]
    while np.any(states != BLEACHED):
        if len(path) >= max_frames:
            log.warning(f"Fluorophores still active after {max_frames} frames; truncating the path.")
            break
        states = step_states(model, states, rng)
        path.append(states)
    return np.stack(path, axis=1)


# --- Traces ---


def simulate_trace(
    cfg: SimConfig, rng: Optional[np.random.Generator] = None, trace_id: str = "trace"
) -> tuple[Trace, GroundTruth]:
    """
    Simulates one baseline-corrected trace and its ground truth.

    Args:
        cfg: Simulation settings.
        rng: Random generator; seeded from cfg.seed when None.
        trace_id: Identifier given to the trace.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    model = build_transition_matrix(cfg)
    paths = simulate_state_paths(model, initial_states(cfg, rng), rng)
    extra = int(rng.integers(cfg.extension_min, cfg.extension_max + 1))
    bleached_tail = np.full((paths.shape[0], extra - 1), BLEACHED, dtype=np.int64)
    paths = np.concatenate([paths, bleached_tail], axis=1)

    counts = (paths == BRIGHT).sum(axis=0)
    n_frames = counts.size
    signal = rng.poisson(cfg.mu_f_photons * counts).astype(float)
    m = cfg.background_mean
    background = rng.poisson(m, n_frames) + rng.normal(m, math.sqrt(m), n_frames)
    intensities = signal + background - 2.0 * m

    trace = Trace.from_intensities(intensities, frame_width=cfg.bin_width, trace_id=trace_id)
    changes = np.flatnonzero(np.diff(counts)) + 1
    truth = GroundTruth(
        counts=tuple(int(v) for v in counts),
        change_points=tuple(float(i * cfg.bin_width) for i in changes),
        mu_f=cfg.mu_f_photons,
        mu_b=0.0,
        sigma_f2=cfg.mu_f_photons,
        sigma_b2=2.0 * m if m > 0 else 0.0,
        n_fluorophores=cfg.n_fluorophores,
    )
    log.debug(
        f"Simulated trace {trace_id}: {n_frames} frames, {cfg.n_fluorophores} fluorophores, "
        f"{changes.size} change points."
    )
    return trace, truth
