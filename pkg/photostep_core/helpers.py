# photostep_core/helpers.py
"""
Utility functions for the photostep core library.

This module provides a collection of helper functions used by other
modules within `photostep_core`. These include utilities for:
- Reading and writing trace CSV files (`frame,time,intensity`).
- Reading and writing JSON documents with line-anchored diagnostics.
- Deriving independent per-chain random streams from a base seed.
- Collecting package versions for run manifests.
"""
from __future__ import annotations

import glob
import json
import logging
import pathlib
import re
import zlib
from importlib import metadata
from typing import Any, Union

import numpy as np
import pandas as pd

from .exceptions import ConfigError, TraceFormatError, ValidationError
from .model import Trace

log = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

TRACE_COLUMNS = ("frame", "time", "intensity")
# relative deviation of a time step from the median step
TIME_STEP_TOLERANCE = 1e-3
_PANDAS_LINE_RE = re.compile(r"line (\d+)")


# --- Trace Files ---


def read_trace_csv(path: PathLike) -> Trace:
    """
    Reads a trace CSV with header `frame,time,intensity`.

    Times are frame midpoints in seconds; the trace ends half a frame after
    the final midpoint.

    Raises:
        TraceFormatError: With file, line and column of the first problem.
    """
    path = pathlib.Path(path)
    log.debug(f"Reading trace CSV {path}")
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except FileNotFoundError as e:
        raise TraceFormatError("file not found", path=str(path)) from e
    except pd.errors.EmptyDataError as e:
        raise TraceFormatError("file is empty", path=str(path), line=1, column=1) from e
    except pd.errors.ParserError as e:
        match = _PANDAS_LINE_RE.search(str(e))
        line = int(match.group(1)) if match else None
        raise TraceFormatError(f"malformed row: {e}", path=str(path), line=line) from e
    except (OSError, UnicodeDecodeError) as e:
        raise TraceFormatError(f"could not read file: {e}", path=str(path)) from e

    header = tuple(str(c).strip() for c in frame.columns)
    if header != TRACE_COLUMNS:
        for col, (got, expected) in enumerate(zip(header + ("",) * 3, TRACE_COLUMNS), start=1):
            if got != expected:
                raise TraceFormatError(
                    f"expected header column '{expected}', found '{got}'",
                    path=str(path),
                    line=1,
                    column=col,
                )
        raise TraceFormatError(
            f"unexpected extra header columns {header[3:]}", path=str(path), line=1, column=4
        )

    values = {}
    for col, name in enumerate(TRACE_COLUMNS, start=1):
        numeric = pd.to_numeric(frame[name], errors="coerce")
        bad = np.flatnonzero(numeric.isna().to_numpy())
        if bad.size:
            row = int(bad[0])
            raise TraceFormatError(
                f"non-numeric {name} value '{frame[name].iloc[row]}'",
                path=str(path),
                line=row + 2,
                column=col,
            )
        values[name] = numeric.to_numpy(dtype=float)

    times = values["time"]
    if times.size < 2:
        raise TraceFormatError("a trace needs at least 2 frames", path=str(path), line=2)
    frames = values["frame"]
    gaps = np.flatnonzero((np.diff(frames) != 1) | (frames[1:] != np.round(frames[1:])))
    if gaps.size:
        row = int(gaps[0]) + 1
        raise TraceFormatError(
            f"frame {frame['frame'].iloc[row]} does not follow frame {frame['frame'].iloc[row - 1]}",
            path=str(path),
            line=row + 2,
            column=1,
        )
    steps = np.diff(times)
    nonincreasing = np.flatnonzero(steps <= 0)
    if nonincreasing.size:
        raise TraceFormatError(
            "time values must be strictly increasing",
            path=str(path),
            line=int(nonincreasing[0]) + 3,
            column=2,
        )
    median_step = float(np.median(steps))
    uneven = np.flatnonzero(np.abs(steps - median_step) > TIME_STEP_TOLERANCE * median_step)
    if uneven.size:
        row = int(uneven[0]) + 1
        raise TraceFormatError(
            f"time step {steps[row - 1]:.6g} differs from the median frame step {median_step:.6g}",
            path=str(path),
            line=row + 2,
            column=2,
        )
    half_frame = median_step / 2.0
    try:
        return Trace(
            times=times,
            intensities=values["intensity"],
            L=float(times[-1] + half_frame),
            trace_id=path.stem,
        )
    except ValidationError as e:
        raise TraceFormatError(str(e), path=str(path)) from e


def write_trace_csv(trace: Trace, path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "frame": np.arange(trace.N),
            "time": trace.times,
            "intensity": trace.intensities,
        }
    )
    frame.to_csv(path, index=False, float_format="%.10g")
    log.debug(f"Wrote trace {trace.trace_id} ({trace.N} frames) to {path}")
    return path


def expand_paths(pattern_or_path: PathLike) -> list[pathlib.Path]:
    """Expands a glob (or a single path) into a sorted list of existing files."""
    text = str(pattern_or_path)
    matches = sorted(pathlib.Path(p) for p in glob.glob(text))
    return [p for p in matches if p.is_file()]


# --- JSON Documents ---


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, pathlib.Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def read_json(path: PathLike) -> Any:
    """
    Loads a JSON document.

    Raises:
        ConfigError: If the file is missing or malformed; decode errors are
                     reported as `path:line:column: message`.
    """
    path = pathlib.Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    except OSError as e:
        raise ConfigError(f"Could not read JSON document {path}: {e}") from e


def write_json(path: PathLike, data: Any) -> pathlib.Path:
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
    except OSError as e:
        raise ConfigError(f"Failed to write JSON document {path}: {e}") from e
    log.debug(f"Wrote JSON document {path}")
    return path


# --- Random Streams ---


def stream_key(label: str) -> int:
    """Stable 32-bit key for a text label (trace ids, group names)."""
    return zlib.crc32(label.encode("utf-8"))


def seed_sequence(base_seed: int, *keys: Union[int, str]) -> np.random.SeedSequence:
    """Independent child stream for (base_seed, keys...), e.g. a trace and chain index."""
    entropy = [int(base_seed)] + [stream_key(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def make_rng(base_seed: int, *keys: Union[int, str]) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(base_seed, *keys))


# --- Environment ---


def package_versions() -> dict[str, str]:
    versions = {}
    for name in ("photostep", "numpy", "scipy", "pandas", "scikit-learn"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions
