# photostep_core/diagnostics.py
"""
MCMC diagnostics: potential scale reduction factor, effective sample size and
Monte Carlo standard error.
"""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
from scipy import fft

from .exceptions import ConvergenceError

log = logging.getLogger(__name__)


def psrf(sequences: Sequence[Sequence[float]]) -> float:
    """
    Gelman-Rubin potential scale reduction factor of equally long sequences.

    Sequences with no between-sequence spread give exactly 1.0 (this covers
    identical chains and identical constants). Distinct constants give inf.

    Raises:
        ConvergenceError: With fewer than two sequences, unequal lengths, or
                          fewer than two samples each.
    """
    try:
        chains = np.asarray(sequences, dtype=float)
    except ValueError as e:
        raise ConvergenceError(f"PSRF needs sequences of equal length: {e}") from e
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise ConvergenceError("PSRF needs at least two sequences of equal length.")
    n = chains.shape[1]
    if n < 2:
        raise ConvergenceError(f"PSRF needs at least two samples per sequence, got {n}.")

    means = chains.mean(axis=1)
    B = n * np.var(means, ddof=1)
    W = np.mean(np.var(chains, axis=1, ddof=1))
    if B == 0.0:
        return 1.0
    if W == 0.0:
        return math.inf
    var_hat = (n - 1) / n * W + B / n
    return float(math.sqrt(var_hat / W))


def autocorrelation(sequence: Sequence[float]) -> np.ndarray:
    """Normalised autocorrelation at lags 0..n-1 via zero-padded FFT."""
    x = np.asarray(sequence, dtype=float)
    x = x - x.mean()
    n = x.size
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(x, size)
    acov = fft.irfft(spectrum * np.conjugate(spectrum), size)[:n]
    if acov[0] == 0.0:
        return np.zeros(n)
    return acov / acov[0]


def ess(sequence: Sequence[float]) -> float:
    """
    Effective sample size using Geyer's initial monotone positive sequence.

    A constant sequence has ESS equal to its length. The result lies in (0, n].
    """
    x = np.asarray(sequence, dtype=float)
    n = x.size
    if n < 2:
        raise ConvergenceError(f"ESS needs at least two samples, got {n}.")
    if np.all(x == x[0]):
        return float(n)
    rho = autocorrelation(x)
    pair_sums = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    total = 0.0
    previous = math.inf
    for value in pair_sums:
        if value <= 0:
            break
        value = min(value, previous)
        total += value
        previous = value
    tau = -1.0 + 2.0 * total
    if tau <= 0:
        return float(n)
    return float(min(n, n / tau))


def mcse(sequence: Sequence[float]) -> float:
    """Monte Carlo standard error of the mean: std / sqrt(ESS)."""
    x = np.asarray(sequence, dtype=float)
    return float(np.std(x, ddof=1) / math.sqrt(ess(x)))
