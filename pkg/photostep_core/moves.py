# photostep_core/moves.py
"""
Reversible-jump moves over change-point configurations.

Five moves are available: birth, death and shift of a single change point,
and the compound add/remove of a short-lived pair (a brief deviation that
returns to the previous level, such as a blink or a dark state).

Every move works in grid-index space of the proposal distribution, so a
proposed location is always a grid time and round trips are bit-identical.
Each move starts by refitting the dwelling counts of the current locations
under the current intensity parameters; counts are a deterministic function
of (locations, parameters), which the acceptance ratios rely on.

Auto-rejections (collisions, empty dwellings, pairs escaping their dwelling)
are reported as rejected MoveOutcomes, never raised.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import InvalidConfigurationError, ValidationError
from .model import (
    ChangePointState,
    Hyperparams,
    IntensityParams,
    Trace,
    fit_dwelling_counts,
    log_k_prior,
    log_kt_prior,
    log_likelihood,
    log_location_prior,
)
from .proposal import ProposalDistribution

log = logging.getLogger(__name__)

# Relative slack on the short-lived duration threshold; grid differences carry
# rounding error of a few ulps.
_TAU_RTOL = 1e-9


class MoveKind(enum.Enum):
    BIRTH = "birth"
    DEATH = "death"
    SHIFT = "shift"
    ADD_PAIR = "add_pair"
    REMOVE_PAIR = "remove_pair"


MOVE_KINDS = tuple(MoveKind)


# --- Move Probabilities ---


@dataclass(frozen=True)
class MoveProbabilities:
    b_k: float
    d_k: float
    a_kkt: float
    r_kkt: float
    pi_kkt: float

    def choose(self, rng: np.random.Generator) -> MoveKind:
        u = rng.random()
        for kind, p in (
            (MoveKind.BIRTH, self.b_k),
            (MoveKind.DEATH, self.d_k),
            (MoveKind.ADD_PAIR, self.a_kkt),
            (MoveKind.REMOVE_PAIR, self.r_kkt),
        ):
            if u < p:
                return kind
            u -= p
        return MoveKind.SHIFT


def _ratio(log_num: float, log_den: float) -> float:
    if log_num == -math.inf:
        return 0.0
    return math.exp(log_num - log_den)


@lru_cache(maxsize=32)
def _probability_tables(hyper: Hyperparams) -> tuple[float, float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    k_max = hyper.k_max
    ks = range(k_max + 1)
    lp = [log_k_prior(k, hyper) for k in range(-2, k_max + 3)]  # lp[k + 2]
    lpt = [log_kt_prior(kt, hyper) for kt in range(-2, k_max + 3)]

    birth = np.array([min(1.0, _ratio(lp[k + 3], lp[k + 2])) for k in ks])
    death = np.array([min(1.0, _ratio(lp[k + 1], lp[k + 2])) if k > 0 else 0.0 for k in ks])
    add = np.zeros((k_max + 1, k_max + 1))
    remove = np.zeros((k_max + 1, k_max + 1))
    for k in ks:
        for kt in range(k + 1):
            here = lp[k + 2] + lpt[kt + 2]
            add[k, kt] = min(1.0, _ratio(lp[k + 4] + lpt[kt + 4], here))
            if kt >= 2:
                remove[k, kt] = min(1.0, _ratio(lp[k] + lpt[kt], here))

    bd_max = float(np.max(birth + death))
    ar_max = float(np.max(add + remove))
    c_eff = hyper.c / bd_max if bd_max > 0 else 0.0
    gamma_eff = hyper.gamma / ar_max if ar_max > 0 else 0.0
    return c_eff, gamma_eff, c_eff * birth, c_eff * death, gamma_eff * add, gamma_eff * remove


def move_scaling(hyper: Hyperparams) -> tuple[float, float]:
    """The largest constants (c, gamma) that keep b+d and a+r within their caps."""
    c_eff, gamma_eff, *_ = _probability_tables(hyper)
    return c_eff, gamma_eff


def move_probabilities(k: int, k_t: int, hyper: Hyperparams) -> MoveProbabilities:
    """Probabilities of each move kind from a state with k change points, k_t short-lived."""
    if not 0 <= k_t <= k <= hyper.k_max:
        raise ValidationError(f"Need 0 <= k_t <= k <= k_max; got k={k}, k_t={k_t}, k_max={hyper.k_max}.")
    _, _, birth, death, add, remove = _probability_tables(hyper)
    b, d, a, r = float(birth[k]), float(death[k]), float(add[k, k_t]), float(remove[k, k_t])
    return MoveProbabilities(b_k=b, d_k=d, a_kkt=a, r_kkt=r, pi_kkt=1.0 - b - d - a - r)


# --- Short-Lived Pairs ---


def _is_short_pair(s: Sequence[float], n: Sequence[int], i: int, tau: float) -> bool:
    # change points i and i+1 (indices into s) bracket dwelling i
    k = len(s) - 2
    if i < 1 or i + 1 > k:
        return False
    return n[i - 1] == n[i + 1] and n[i] != n[i - 1] and s[i + 1] - s[i] <= tau * (1.0 + _TAU_RTOL)


def _classify(s: Sequence[float], n: Sequence[int], tau: float) -> tuple[int, tuple[bool, ...]]:
    k = len(s) - 2
    flags = [False] * k
    i = 1
    while i < k:
        if _is_short_pair(s, n, i, tau):
            flags[i - 1] = flags[i] = True
            i += 2
        else:
            i += 1
    return sum(flags), tuple(flags)


def classify_short_pairs(state: ChangePointState, hyper: Hyperparams) -> tuple[int, tuple[bool, ...]]:
    """
    Labels short-lived pairs greedily from left to right.

    Consecutive change points form a pair when the count before them equals
    the count after them, differs from the count between them, and they are
    at most tau apart. Each change point joins at most one pair.

    Returns:
        (k_t, short_flags) with k_t = 2 * number of pairs.
    """
    return _classify(state.s, state.n, hyper.tau)


def remove_partners(state: ChangePointState, j: int, hyper: Hyperparams) -> list[int]:
    """Adjacent change points that form a valid short-lived pair with change point j (1-based)."""
    return [p for p in (j - 1, j + 1) if _is_short_pair(state.s, state.n, min(j, p), hyper.tau)]


def duration_accept(d: float, hyper: Hyperparams, rng: np.random.Generator) -> bool:
    """Accepts a short-lived duration d with probability exp(-lambda_D * d)."""
    return bool(rng.random() < math.exp(-hyper.lambda_D * d))


# --- Outcome ---


@dataclass(frozen=True)
class MoveOutcome:
    """Result of one move.

    ``current_state`` is the starting configuration with counts refitted to the
    current parameters; ``state`` is where the chain goes next.
    """

    move_kind: MoveKind
    current_state: ChangePointState
    proposed_state: ChangePointState
    log_acceptance: float
    accepted: bool

    @property
    def state(self) -> ChangePointState:
        return self.proposed_state if self.accepted else self.current_state


def _rejected(kind: MoveKind, current: ChangePointState) -> MoveOutcome:
    return MoveOutcome(kind, current, current, -math.inf, False)


def _decide(
    kind: MoveKind, current: ChangePointState, proposed: ChangePointState, log_alpha: float, rng
) -> MoveOutcome:
    accepted = bool(rng.random() < math.exp(min(0.0, log_alpha)))
    if log.isEnabledFor(logging.DEBUG):
        log.debug(f"{kind.value}: k {current.k}->{proposed.k}, log alpha {log_alpha:.4g}, accepted={accepted}")
    return MoveOutcome(kind, current, proposed, log_alpha, accepted)


# --- State Construction ---


def state_from_locations(
    trace: Trace, s: Sequence[float], params: IntensityParams, hyper: Hyperparams
) -> ChangePointState:
    """Builds a full state from locations: fits counts and labels short-lived pairs.

    Raises:
        InvalidConfigurationError: If a dwelling holds no frames.
    """
    s = tuple(s)
    n = fit_dwelling_counts(trace, s, params)
    k_t, flags = _classify(s, n, hyper.tau)
    return ChangePointState(s=s, n=n, k_t=k_t, short_flags=flags)


def state_from_indices(
    trace: Trace,
    dist: ProposalDistribution,
    indices: Sequence[int],
    params: IntensityParams,
    hyper: Hyperparams,
) -> ChangePointState:
    s = (0.0, *(float(dist.grid[i]) for i in indices), trace.L)
    return state_from_locations(trace, s, params, hyper)


def refit_state(
    trace: Trace, state: ChangePointState, params: IntensityParams, hyper: Hyperparams
) -> ChangePointState:
    return state_from_locations(trace, state.s, params, hyper)


def _log_target(trace: Trace, state: ChangePointState, params: IntensityParams, hyper: Hyperparams) -> float:
    # intensity prior cancels in every change-point move
    return (
        log_likelihood(trace, state, params)
        + log_k_prior(state.k, hyper)
        + log_kt_prior(state.k_t, hyper)
        + log_location_prior(state.interior, state.k, state.L)
    )


# --- Acceptance Ratios ---


def birth_log_acceptance(
    trace: Trace,
    smaller: ChangePointState,
    larger: ChangePointState,
    new_index: int,
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
) -> float:
    """Log acceptance of a birth at grid index `new_index` taking `smaller` to `larger`.

    The death taking `larger` back to `smaller` has exactly the negated value.
    """
    k = smaller.k
    b_k = move_probabilities(k, smaller.k_t, hyper).b_k
    d_next = move_probabilities(k + 1, larger.k_t, hyper).d_k
    return (
        _log_target(trace, larger, params, hyper)
        - _log_target(trace, smaller, params, hyper)
        + math.log(d_next)
        - math.log(k + 1)
        - math.log(b_k)
        - float(dist.log_pmf[new_index])
    )


def _log_pair_gap_probability(g: int, hyper: Hyperparams, h: float) -> float:
    # P(max(1, ceil(D / h)) = g) for D ~ Exp(lambda_D)
    rate = hyper.lambda_D * h
    return -rate * (g - 1) + math.log(-math.expm1(-rate))


def add_pair_log_acceptance(
    trace: Trace,
    smaller: ChangePointState,
    larger: ChangePointState,
    pair: tuple[int, int],
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
) -> float:
    """Log acceptance of adding the pair at grid indices `pair` to `smaller`.

    The forward mass covers the centre draw, the gap law and the duration gate;
    the reverse mass covers both orders in which the pair can be picked for
    removal from `larger`. The matching remove has exactly the negated value.
    """
    left, right = pair
    g = right - left
    centre = left + g // 2
    h = dist.resolution
    k, kt_small, kt_large = smaller.k, smaller.k_t, larger.k_t
    a = move_probabilities(k, kt_small, hyper).a_kkt
    r = move_probabilities(k + 2, kt_large, hyper).r_kkt

    positions = dist.indices_of(larger.interior)
    j_left = int(np.searchsorted(positions, left)) + 1
    j_right = j_left + 1
    reverse = 0.0
    for j in (j_left, j_right):
        if larger.short_flags[j - 1]:
            reverse += 1.0 / (kt_large * len(remove_partners(larger, j, hyper)))
    if reverse == 0.0 or r == 0.0 or a == 0.0:
        return -math.inf

    log_forward = (
        math.log(a)
        + float(dist.log_pmf[centre])
        + _log_pair_gap_probability(g, hyper, h)
        - hyper.lambda_D * g * h
    )
    return (
        _log_target(trace, larger, params, hyper)
        - _log_target(trace, smaller, params, hyper)
        + math.log(r)
        + math.log(reverse)
        - log_forward
    )


# --- Moves ---


def _current(trace, state, params, hyper) -> ChangePointState:
    return refit_state(trace, state, params, hyper)


def birth_move(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
    rng: np.random.Generator,
) -> MoveOutcome:
    """Proposes one new change point drawn from the full proposal."""
    current = _current(trace, state, params, hyper)
    if current.k >= hyper.k_max:
        return _rejected(MoveKind.BIRTH, current)
    new_index = dist.sample_index(rng)
    indices = dist.indices_of(current.interior)
    if new_index in indices:
        return _rejected(MoveKind.BIRTH, current)
    try:
        proposed = state_from_indices(trace, dist, sorted([*indices.tolist(), new_index]), params, hyper)
    except InvalidConfigurationError:
        return _rejected(MoveKind.BIRTH, current)
    log_alpha = birth_log_acceptance(trace, current, proposed, new_index, params, hyper, dist)
    return _decide(MoveKind.BIRTH, current, proposed, log_alpha, rng)


def death_move(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
    rng: np.random.Generator,
) -> MoveOutcome:
    """Removes a uniformly chosen change point."""
    current = _current(trace, state, params, hyper)
    if current.k == 0:
        return _rejected(MoveKind.DEATH, current)
    indices = dist.indices_of(current.interior).tolist()
    removed = indices.pop(int(rng.integers(current.k)))
    try:
        proposed = state_from_indices(trace, dist, indices, params, hyper)
    except InvalidConfigurationError:
        return _rejected(MoveKind.DEATH, current)
    log_alpha = -birth_log_acceptance(trace, proposed, current, removed, params, hyper, dist)
    return _decide(MoveKind.DEATH, current, proposed, log_alpha, rng)


def shift_move(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
    rng: np.random.Generator,
) -> MoveOutcome:
    """Moves one uniformly chosen change point within its neighbours' interval."""
    current = _current(trace, state, params, hyper)
    if current.k == 0:
        return MoveOutcome(MoveKind.SHIFT, current, current, 0.0, True)
    indices = dist.indices_of(current.interior).tolist()
    j = int(rng.integers(current.k))
    lower = indices[j - 1] if j > 0 else -1
    upper = indices[j + 1] if j + 1 < current.k else dist.size
    old = indices[j]
    new = dist.sample_index(rng, lower + 1, upper)
    if new == old:
        return MoveOutcome(MoveKind.SHIFT, current, current, 0.0, True)
    indices[j] = new
    try:
        proposed = state_from_indices(trace, dist, indices, params, hyper)
    except InvalidConfigurationError:
        return _rejected(MoveKind.SHIFT, current)
    pi_old = move_probabilities(current.k, current.k_t, hyper).pi_kkt
    pi_new = move_probabilities(proposed.k, proposed.k_t, hyper).pi_kkt
    log_alpha = (
        _log_target(trace, proposed, params, hyper)
        - _log_target(trace, current, params, hyper)
        + float(dist.log_pmf[old])
        - float(dist.log_pmf[new])
        + math.log(pi_new)
        - math.log(pi_old)
    )
    return _decide(MoveKind.SHIFT, current, proposed, log_alpha, rng)


def pair_indices(centre: int, gap: int) -> tuple[int, int]:
    """Grid indices of a pair of width `gap` steps centred on `centre`."""
    left = centre - gap // 2
    return left, left + gap


def add_short_state_move(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
    rng: np.random.Generator,
) -> MoveOutcome:
    """Inserts a short-lived pair into a single dwelling."""
    current = _current(trace, state, params, hyper)
    kind = MoveKind.ADD_PAIR
    if current.k + 2 > hyper.k_max:
        return _rejected(kind, current)
    centre = dist.sample_index(rng)
    duration = rng.exponential(1.0 / hyper.lambda_D)
    gap = max(1, math.ceil(duration / dist.resolution))
    if not duration_accept(gap * dist.resolution, hyper, rng):
        return _rejected(kind, current)
    left, right = pair_indices(centre, gap)
    if left < 0 or right >= dist.size:
        return _rejected(kind, current)
    indices = dist.indices_of(current.interior)
    if np.any((indices >= left) & (indices <= right)):
        return _rejected(kind, current)
    try:
        proposed = state_from_indices(trace, dist, sorted([*indices.tolist(), left, right]), params, hyper)
    except InvalidConfigurationError:
        return _rejected(kind, current)
    j_left = int(np.searchsorted(indices, left)) + 1
    if not _is_short_pair(proposed.s, proposed.n, j_left, hyper.tau):
        return _rejected(kind, current)
    log_alpha = add_pair_log_acceptance(trace, current, proposed, (left, right), params, hyper, dist)
    return _decide(kind, current, proposed, log_alpha, rng)


def remove_short_state_move(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
    rng: np.random.Generator,
) -> MoveOutcome:
    """Removes a short-lived pair: a flagged change point and one valid neighbour."""
    current = _current(trace, state, params, hyper)
    kind = MoveKind.REMOVE_PAIR
    if current.k_t < 2:
        return _rejected(kind, current)
    flagged = [j for j, flag in enumerate(current.short_flags, start=1) if flag]
    first = flagged[int(rng.integers(len(flagged)))]
    partners = remove_partners(current, first, hyper)
    if not partners:
        return _rejected(kind, current)
    second = partners[int(rng.integers(len(partners)))]
    indices = dist.indices_of(current.interior).tolist()
    pair = (indices[min(first, second) - 1], indices[max(first, second) - 1])
    remaining = [i for i in indices if i not in pair]
    try:
        proposed = state_from_indices(trace, dist, remaining, params, hyper)
    except InvalidConfigurationError:
        return _rejected(kind, current)
    log_alpha = -add_pair_log_acceptance(trace, proposed, current, pair, params, hyper, dist)
    return _decide(kind, current, proposed, log_alpha, rng)


MoveFunction = Callable[
    [Trace, ChangePointState, IntensityParams, Hyperparams, ProposalDistribution, np.random.Generator],
    MoveOutcome,
]

MOVES: dict[MoveKind, MoveFunction] = {
    MoveKind.BIRTH: birth_move,
    MoveKind.DEATH: death_move,
    MoveKind.SHIFT: shift_move,
    MoveKind.ADD_PAIR: add_short_state_move,
    MoveKind.REMOVE_PAIR: remove_short_state_move,
}


def propose_move(
    trace: Trace,
    state: ChangePointState,
    params: IntensityParams,
    hyper: Hyperparams,
    dist: ProposalDistribution,
    rng: np.random.Generator,
    kind: Optional[MoveKind] = None,
) -> MoveOutcome:
    """Draws a move kind from the current move probabilities (unless given) and runs it.

    The kind is drawn for the state refitted to `params`, which is the state
    every move starts from.
    """
    if kind is None:
        state = refit_state(trace, state, params, hyper)
        kind = move_probabilities(state.k, state.k_t, hyper).choose(rng)
    return MOVES[kind](trace, state, params, hyper, dist, rng)
