"""Delta Similarity stream monitor and HoDS feature extraction.

For three consecutive queries the monitor takes the two updates
``d1 = x[i-1] - x[i-2]`` and ``d2 = x[i] - x[i-1]`` and records their cosine.
The last ``window`` values feed a 201-bin histogram: 200 half-open bins of
width 0.01 over [-1, 1) plus a singleton bin for exactly 1.0.
"""
from __future__ import annotations

import csv
from collections import deque
from typing import Iterable

import numpy as np

N_BINS = 201
DEFAULT_WINDOW = 256


class StreamError(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


def _floor_times_100(ds: np.ndarray) -> np.ndarray:
    """floor(100 * ds) computed exactly.

    The rounded product can land on an integer when the true product sits
    just below it; the product's rounding error (Dekker split) settles that.
    """
    p = ds * 100.0
    c = 134217729.0 * ds
    hi = c - (c - ds)
    err = (hi * 100.0 - p) + (ds - hi) * 100.0
    f = np.floor(p)
    return f - ((p == f) & (err < 0))


def ds_bin_indices(ds) -> np.ndarray:
    ds = np.asarray(ds, dtype=np.float64)
    if ds.size and (ds.min() < -1.0 or ds.max() > 1.0):
        raise ValueError("DS values out of range")
    # bins are [-1 + k/100, -1 + (k+1)/100) as real intervals, plus {1.0}
    idx = np.clip(100 + _floor_times_100(ds), 0, 199).astype(np.int64)
    idx[ds == 1.0] = 200
    return idx


def ds_bin_index(ds: float) -> int:
    if not -1.0 <= ds <= 1.0:
        raise ValueError(f"DS value out of range: {ds!r}")
    return int(ds_bin_indices([ds])[0])


def minmax_normalize(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    lo, hi = counts.min(), counts.max()
    if hi == lo:
        return np.zeros_like(counts)
    return (counts - lo) / (hi - lo)


def hods_from_values(values) -> np.ndarray:
    """Normalized 201-bin histogram of a window of DS values."""
    counts = np.bincount(ds_bin_indices(values), minlength=N_BINS)
    return minmax_normalize(counts)


class DsMonitor:
    """Per-stream DS state: previous query, previous update and a DS ring window.

    A zero-norm update never produces a DS value. It also invalidates the
    stored update, so emission resumes only after two consecutive nonzero
    updates.
    """

    def __init__(self, window: int = DEFAULT_WINDOW):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.reset()

    def reset(self) -> None:
        self.dim: int | None = None
        self.prev_query: np.ndarray | None = None
        self.prev_delta: np.ndarray | None = None
        self.prev_norm = 0.0
        self.values: deque[float] = deque(maxlen=self.window)
        self.ds_count = 0

    @property
    def full(self) -> bool:
        return len(self.values) == self.window

    def push(self, x) -> float | None:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if self.dim is None:
            self.dim = x.size
        elif x.size != self.dim:
            raise StreamError(f"query has dimension {x.size}, stream has {self.dim}")
        prev = self.prev_query
        self.prev_query = x.copy()
        if prev is None:
            return None
        delta = x - prev
        norm = float(np.sqrt(np.dot(delta, delta)))
        if norm == 0.0:
            self.prev_delta = None
            return None
        ds = None
        if self.prev_delta is not None:
            ds = float(np.dot(self.prev_delta, delta) / (self.prev_norm * norm))
            ds = min(1.0, max(-1.0, ds))
            self.values.append(ds)
            self.ds_count += 1
        self.prev_delta = delta
        self.prev_norm = norm
        return ds

    def hods(self) -> np.ndarray:
        if not self.full:
            raise InsufficientHistory(
                f"window holds {len(self.values)} of {self.window} DS values")
        return hods_from_values(np.fromiter(self.values, dtype=np.float64))


def hods_extract(monitor: DsMonitor) -> np.ndarray:
    return monitor.hods()


def ds_series(queries: Iterable, window: int = DEFAULT_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Replay queries through a fresh monitor.

    Returns the emitted DS values and, for each, the index of the query that
    produced it.
    """
    mon = DsMonitor(window)
    vals, where = [], []
    for i, q in enumerate(queries):
        ds = mon.push(q)
        if ds is not None:
            vals.append(ds)
            where.append(i)
    return np.asarray(vals, dtype=np.float64), np.asarray(where, dtype=np.int64)


def write_ds_csv(path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "ds"])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])


def read_ds_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.asarray([float(r["ds"]) for r in rows], dtype=np.float64)
