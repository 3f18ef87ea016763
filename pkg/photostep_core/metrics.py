# photostep_core/metrics.py
"""
Evaluation of estimated traces against ground truth.

Frame-wise metrics treat every integer fluorophore count as its own label:
a frame is a true positive when the counts agree and are non-zero, a true
negative when both are zero, a false positive when the estimate is too high
and a false negative when it is too low.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import cohen_kappa_score

from .exceptions import ValidationError
from .model import PARAM_NAMES

log = logging.getLogger(__name__)

# --- Constants ---
CI_Z = 1.96
RATE_COLUMNS = ("accuracy", "precision", "sensitivity", "specificity", "cohens_kappa")
ERROR_COLUMNS = tuple(f"abs_error_{name}" for name in PARAM_NAMES)


@dataclass(frozen=True)
class FramewiseReport:
    """Frame-wise agreement between true and estimated counts.

    Rates whose denominator is zero are None.
    """

    accuracy: float
    precision: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    cohens_kappa: Optional[float]
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n_frames(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TraceEstimate:
    """Per-frame counts, intensity and intensity parameters of one trace.

    Built from either a posterior summary or a ground-truth document, so a
    truth directory can stand in for an estimates directory.
    """

    trace_id: str
    counts: np.ndarray
    intensity: np.ndarray
    params: dict[str, float]

    @classmethod
    def from_document(cls, trace_id: str, doc: Mapping[str, Any]) -> TraceEstimate:
        try:
            if "frame_counts" in doc:
                counts = np.asarray(doc["frame_counts"], dtype=np.int64)
                intensity = np.asarray(doc["predicted_intensity"], dtype=float)
                params = {name: float(doc["param_means"][name]) for name in PARAM_NAMES}
            else:
                counts = np.asarray(doc["counts"], dtype=np.int64)
                params = {name: float(doc[name]) for name in PARAM_NAMES}
                intensity = params["mu_f"] * counts + params["mu_b"]
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Document for trace {trace_id} is neither a summary nor a ground truth: {e}") from e
        return cls(trace_id=trace_id, counts=counts, intensity=intensity, params=params)


# --- Per-trace Metrics ---


def _check_lengths(truth: np.ndarray, estimate: np.ndarray, what: str) -> None:
    if truth.shape != estimate.shape or truth.ndim != 1:
        raise ValidationError(f"{what} lengths differ: truth {truth.shape}, estimate {estimate.shape}.")


def rmse_intensity(truth: Sequence[float], estimate: Sequence[float]) -> float:
    """Root mean square difference between two per-frame intensity traces."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    _check_lengths(truth, estimate, "Intensity trace")
    if truth.size == 0:
        raise ValidationError("Cannot compute the RMSE of empty traces.")
    return float(np.sqrt(np.mean((truth - estimate) ** 2)))


def finite_or_none(value: Any) -> Optional[float]:
    """Float value, or None for NaN, inf and missing values."""
    try:
        value = float(value)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def _kappa(truth: np.ndarray, estimate: np.ndarray) -> Optional[float]:
    if np.array_equal(truth, estimate):
        return 1.0
    labels = np.union1d(truth, estimate)
    value = float(cohen_kappa_score(truth, estimate, labels=labels))
    return value if math.isfinite(value) else None


def framewise_report(truth_counts: Sequence[int], est_counts: Sequence[int]) -> FramewiseReport:
    """
    Confusion tallies, rates and multiclass Cohen's kappa over frames.

    Specificity is None when no frame is truly empty.

    Raises:
        ValidationError: If the sequences are empty or differ in length.
    """
    truth = np.asarray(truth_counts, dtype=np.int64)
    est = np.asarray(est_counts, dtype=np.int64)
    _check_lengths(truth, est, "Count sequence")
    if truth.size == 0:
        raise ValidationError("Cannot compare empty count sequences.")

    match = truth == est
    tp = int(np.count_nonzero(match & (truth > 0)))
    tn = int(np.count_nonzero(match & (truth == 0)))
    fp = int(np.count_nonzero(est > truth))
    fn = int(np.count_nonzero(est < truth))
    has_empty = bool(np.any(truth == 0))
    return FramewiseReport(
        accuracy=(tp + tn) / truth.size,
        precision=_ratio(tp, tp + fp),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp) if has_empty else None,
        cohens_kappa=_kappa(truth, est),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
    )


def _param_value(params: Union[Mapping[str, float], Any], name: str) -> float:
    if isinstance(params, Mapping):
        return float(params[name])
    return float(getattr(params, name))


def param_abs_errors(
    truth: Union[Mapping[str, float], Any], estimate: Union[Mapping[str, float], Any]
) -> dict[str, float]:
    """|truth - estimate| for mu_f, mu_b, sigma_f2 and sigma_b2.

    Either argument may be a mapping or an object with those attributes
    (IntensityParams, GroundTruth).
    """
    return {name: abs(_param_value(truth, name) - _param_value(estimate, name)) for name in PARAM_NAMES}


# --- Batch Tables ---


def trace_metrics(truth: TraceEstimate, estimate: TraceEstimate) -> dict[str, Any]:
    """One metrics table row for a trace."""
    report = framewise_report(truth.counts, estimate.counts)
    row: dict[str, Any] = {"trace_id": truth.trace_id, "n_frames": report.n_frames}
    row["rmse_intensity"] = rmse_intensity(truth.intensity, estimate.intensity)
    row.update({name: getattr(report, name) for name in RATE_COLUMNS})
    row.update(tp=report.tp, tn=report.tn, fp=report.fp, fn=report.fn)
    errors = param_abs_errors(truth.params, estimate.params)
    row.update({f"abs_error_{name}": value for name, value in errors.items()})
    return row


def metrics_table(rows: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """Per-trace metrics, sorted by trace id; absent rates become NaN."""
    if not rows:
        raise ValidationError("No traces to tabulate.")
    frame = pd.DataFrame(list(rows))
    return frame.sort_values("trace_id", kind="mergesort").reset_index(drop=True)


def aggregate_metrics(table: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and normal-approximation 95% confidence half-width per metric.

    Each column uses only the traces where it is defined. Returns a frame with
    rows 'mean', 'ci95' and 'n' indexed by `statistic`.
    """
    columns = ["rmse_intensity", *RATE_COLUMNS, *ERROR_COLUMNS]
    columns = [c for c in columns if c in table.columns]
    values = table[columns].apply(pd.to_numeric, errors="coerce")
    n = values.count()
    mean = values.mean()
    sd = values.std(ddof=1)
    half = CI_Z * sd / np.sqrt(n.where(n > 0))
    half = half.where(n > 1, 0.0)
    out = pd.DataFrame({"mean": mean, "ci95": half, "n": n.astype(float)}).T
    out.index.name = "statistic"
    return out


def write_metrics_csv(table: pd.DataFrame, path) -> pd.DataFrame:
    """Writes per-trace rows followed by the aggregate rows to one CSV."""
    agg = aggregate_metrics(table).reset_index().rename(columns={"statistic": "trace_id"})
    combined = pd.concat([table, agg], ignore_index=True)
    combined.to_csv(path, index=False, float_format="%.10g")
    log.debug(f"Wrote metrics for {len(table)} traces to {path}")
    return combined
