"""Loading delimiter-separated time series and turning them into streams.

Files are expected to hold one timestamp column followed by numeric series.
Commas or semicolons are detected automatically; with semicolons a decimal
comma is accepted as well.
"""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

import numpy as np

from .core import BoxDomain
from .environments import ConfigError, Stream, change_points, stream_rng

DATASET_KINDS = ("electricity", "traffic", "ett")
MISSING_TOKENS = {"", "na", "nan", "null", "none", "?"}
ETT_WEIGHTS = (0.3, 0.1, 0.25, 0.1, 0.15, 0.1)


class DatasetAbsent(FileNotFoundError):
    """The dataset file does not exist; callers may substitute a stand-in."""


class DatasetFormatError(ValueError):
    """A cell could not be parsed or the file lacks the requested columns."""


@dataclass
class DatasetSpec:
    """Where a dataset lives and how it becomes a stream.

    ``factor`` is the capacity factor (0.85 electricity, 0.8 traffic) and
    ``window`` the trailing window in rows. For ``ett`` the budget is
    ``high`` outside and ``low`` inside ``n_windows`` maintenance windows of
    ``window_len`` rounds.
    """

    kind: str = "electricity"
    path: Optional[str] = None
    d: Optional[int] = None
    T: int = 10_000
    start: int = 0
    window: int = 24
    factor: Optional[float] = None
    max_missing: float = 0.05
    weights: Tuple[float, ...] = ETT_WEIGHTS
    high: float = 0.7
    low: float = 0.3
    n_windows: int = 8
    window_len: int = 100
    fallback: bool = True
    fallback_noise: float = 0.05
    fallback_seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.d is None:
            self.d = len(self.weights) if self.kind == "ett" else 20
        if self.factor is None:
            self.factor = 0.8 if self.kind == "traffic" else 0.85
        self.weights = tuple(float(w) for w in self.weights)
        if self.kind == "ett" and len(self.weights) != self.d:
            raise ConfigError(f"ett needs {self.d} weights, got {len(self.weights)}")
        if self.T < 1 or self.d < 1 or self.window < 1 or self.start < 0:
            raise ConfigError("T, d and window must be >= 1 and start >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = list(self.weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys {sorted(unknown)}; valid keys: {sorted(known)}")
        return cls(**data)


# ------------------------------------------------------------ parsing

def _sniff_delimiter(sample: str) -> str:
    try:
        return csv.Sniffer().sniff(sample, delimiters=",;").delimiter
    except csv.Error:
        first = sample.splitlines()[0] if sample else ""
        return ";" if first.count(";") > first.count(",") else ","


def read_table(path: str) -> Tuple[list, np.ndarray]:
    """Parse a table into (header, float matrix with NaN for missing cells).

    The first column (timestamps) is dropped. Raises
    :class:`DatasetFormatError` naming the row and column of any cell that is
    neither numeric nor a missing marker.
    """
    if path is None or not os.path.exists(path):
        raise DatasetAbsent(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        sample = fh.read(65536)
        fh.seek(0)
        delim = _sniff_delimiter(sample)
        reader = csv.reader(fh, delimiter=delim)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError(f"{path}: empty file")
        rows = []
        for r, line in enumerate(reader, start=2):
            if not line or all(not c.strip() for c in line):
                continue
            vals = []
            for c, cell in enumerate(line[1:], start=2):
                tok = cell.strip()
                if tok.lower() in MISSING_TOKENS:
                    vals.append(np.nan)
                    continue
                if delim == ";":
                    tok = tok.replace(",", ".")
                try:
                    vals.append(float(tok))
                except ValueError:
                    raise DatasetFormatError(
                        f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            rows.append(vals)
    width = len(header) - 1
    mat = np.full((len(rows), width), np.nan)
    for i, vals in enumerate(rows):
        k = min(len(vals), width)
        mat[i, :k] = vals[:k]
    return header[1:], mat


def forward_fill(mat: np.ndarray) -> np.ndarray:
    """Carry the last observed value forward; leading gaps take the first
    observed value of their column."""
    out = mat.copy()
    n = out.shape[0]
    idx = np.where(np.isnan(out), 0, np.arange(n)[:, None])
    np.maximum.accumulate(idx, axis=0, out=idx)
    out = out[idx, np.arange(out.shape[1])]
    for j in range(out.shape[1]):
        col = out[:, j]
        bad = np.isnan(col)
        if bad.any() and not bad.all():
            col[bad] = col[~bad][0]
    return out


def minmax(mat: np.ndarray) -> np.ndarray:
    """Scale each column to [0, 1]; constant columns become 0."""
    lo = mat.min(axis=0)
    span = mat.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (mat - lo) / safe, 0.0)


def select_columns(mat: np.ndarray, d: int, max_missing: float = 0.05) -> np.ndarray:
    """Indices of the first ``d`` columns with a missing share below ``max_missing``."""
    share = np.isnan(mat).mean(axis=0) if mat.shape[0] else np.ones(mat.shape[1])
    eligible = np.nonzero(share < max_missing)[0]
    if len(eligible) < d:
        raise DatasetFormatError(
            f"requested d={d} series but only {len(eligible)} of {mat.shape[1]} columns qualify")
    return eligible[:d]


def load_matrix(spec: DatasetSpec) -> np.ndarray:
    """Selected, gap-filled and min-max normalised series (rows are hours)."""
    _, raw = read_table(spec.path)
    cols = select_columns(raw, spec.d, spec.max_missing)
    mat = forward_fill(raw[:, cols])
    if np.isnan(mat).any():
        r, c = np.argwhere(np.isnan(mat))[0]
        raise DatasetFormatError(f"{spec.path}: unfilled cell at data row {r + 1}, series {cols[c]}")
    return minmax(mat)


# ------------------------------------------------------------ rolling windows

def trailing_mean(x: np.ndarray, window: int) -> np.ndarray:
    """``out[i]`` is the mean of ``x[i-window:i]``; shorter prefixes use every
    earlier value and ``out[0] = x[0]``."""
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(len(x))
    lo = np.maximum(i - window, 0)
    cnt = i - lo
    out = np.empty(len(x))
    out[1:] = (c[i[1:]] - c[lo[1:]]) / cnt[1:]
    if len(x):
        out[0] = x[0]
    return out


def trailing_max(x: np.ndarray, window: int) -> np.ndarray:
    """``out[i] = max(x[i-window:i])`` with the same prefix rule as :func:`trailing_mean`."""
    from numpy.lib.stride_tricks import sliding_window_view

    n = len(x)
    out = np.empty(n)
    if n == 0:
        return out
    out[0] = x[0]
    k = min(window, n - 1)
    out[1:k + 1] = np.maximum.accumulate(x)[:k]
    if n > window:
        win = sliding_window_view(x, window).max(axis=1)
        out[window:] = win[: n - window]
    return out


def _take(mat: np.ndarray, spec: DatasetSpec) -> slice:
    if spec.start + spec.T > mat.shape[0]:
        raise ConfigError(f"need {spec.start + spec.T} rows, file has {mat.shape[0]}")
    return slice(spec.start, spec.start + spec.T)


def _stream(spec: DatasetSpec, targets: np.ndarray, A: np.ndarray, b: np.ndarray, meta: dict) -> Stream:
    domain = BoxDomain.cube(targets.shape[1])
    return Stream(domain, "quadratic", np.ascontiguousarray(targets), A, b, b.copy(), xi=None,
                  name=f"{spec.kind}-T{spec.T}-d{spec.d}", meta=meta)


def build_electricity(mat: np.ndarray, spec: DatasetSpec) -> Stream:
    """Budget ``factor`` times the trailing mean of total demand."""
    rows = _take(mat, spec)
    budget = spec.factor * trailing_mean(mat.sum(axis=1), spec.window)
    b = budget[rows]
    targets = mat[rows]
    return _stream(spec, targets, np.ones_like(targets), b, {"kind": "electricity"})


def build_traffic(mat: np.ndarray, spec: DatasetSpec) -> Stream:
    """Budget ``factor`` times the trailing peak of total demand."""
    rows = _take(mat, spec)
    budget = spec.factor * trailing_max(mat.sum(axis=1), spec.window)
    b = budget[rows]
    targets = mat[rows]
    return _stream(spec, targets, np.ones_like(targets), b, {"kind": "traffic"})


def maintenance_budget(T: int, high: float, low: float, n_windows: int, width: int) -> np.ndarray:
    b = np.full(T, float(high))
    for tau in change_points(T, n_windows):
        b[tau - 1:min(tau - 1 + width, T)] = low
    return b


def build_ett(mat: np.ndarray, spec: DatasetSpec) -> Stream:
    """Weighted load ``w @ x <= theta_t`` with low-budget maintenance windows."""
    rows = _take(mat, spec)
    targets = mat[rows]
    w = np.asarray(spec.weights, dtype=float)
    A = np.tile(w, (spec.T, 1))
    b = maintenance_budget(spec.T, spec.high, spec.low, spec.n_windows, spec.window_len)
    windows = [(int(t), int(min(t + spec.window_len, spec.T + 1)))
               for t in change_points(spec.T, spec.n_windows)]
    return _stream(spec, targets, A, b, {"kind": "ett", "windows": windows})


BUILDERS = {"electricity": build_electricity, "traffic": build_traffic, "ett": build_ett}


def diurnal_matrix(rows: int, d: int, seed: int = 0, noise: float = 0.05, period: int = 24) -> np.ndarray:
    """Seeded stand-in series: phase-shifted daily sinusoids plus noise, in [0, 1]."""
    rng = stream_rng(seed, f"diurnal-{d}", 0)
    t = np.arange(rows)[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=d)
    level = rng.uniform(0.3, 0.7, size=d)
    mat = level + 0.25 * np.sin(2 * np.pi * t / period + phase) + noise * rng.standard_normal((rows, d))
    return minmax(mat)


def load_stream(spec: DatasetSpec) -> Tuple[Stream, bool]:
    """Build the stream for ``spec``; returns ``(stream, used_stand_in)``.

    When the file is missing and ``spec.fallback`` is set, the seeded diurnal
    stand-in replaces the matrix. Otherwise :class:`DatasetAbsent` propagates.
    """
    try:
        mat = load_matrix(spec)
        stand_in = False
    except DatasetAbsent:
        if not spec.fallback:
            raise
        mat = diurnal_matrix(spec.start + spec.T, spec.d, spec.fallback_seed, spec.fallback_noise)
        stand_in = True
    stream = BUILDERS[spec.kind](mat, spec)
    if stand_in:
        stream.name += "-standin"
        stream.meta["stand_in"] = True
    return stream, stand_in
