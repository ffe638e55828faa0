"""Query traces: the ordered, phase-annotated record of every oracle call.

Binary layout (little-endian)::

    b"GWTR" | u32 version=1 | u32 d | u64 record_count
    per record: u8 phase | u32 iteration | d x f32 query

Run metadata (method, seed, config, outcome) goes to a JSON sidecar next to
the trace file.
"""
from __future__ import annotations

import enum
import json
import struct
from pathlib import Path

import numpy as np

from ..numkit import Rng
from .data import Dataset

TRACE_MAGIC = b"GWTR"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_REC = struct.Struct("<BI")


class Phase(enum.IntEnum):
    ZERO_ORDER = 0
    LINE_SEARCH = 1
    OTHER = 2
    INJECTED_BENIGN = 3


class TraceFormatError(ValueError):
    pass


class QueryTrace:
    """Append-only list of (query, phase, iteration).

    Queries are held as float32, the same precision the file stores, so a
    trace replays identically before and after a save/load round trip.
    """

    def __init__(self, d: int, capacity: int = 256):
        self.d = int(d)
        self._q = np.empty((max(1, capacity), self.d), dtype=np.float32)
        self._phase = np.empty(max(1, capacity), dtype=np.uint8)
        self._iter = np.empty(max(1, capacity), dtype=np.uint32)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = len(self._phase)
        if need <= cap:
            return
        cap = max(need, 2 * cap)
        for name in ("_q", "_phase", "_iter"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[:self._n] = old[:self._n]
            setattr(self, name, new)

    def append(self, query, phase: Phase, iteration: int = 0) -> None:
        self._grow(self._n + 1)
        self._q[self._n] = np.asarray(query, dtype=np.float32).reshape(-1)
        self._phase[self._n] = int(phase)
        self._iter[self._n] = int(iteration)
        self._n += 1

    @classmethod
    def from_arrays(cls, queries, phases, iterations=None) -> "QueryTrace":
        queries = np.asarray(queries, dtype=np.float32)
        n, d = queries.shape
        tr = cls(d, capacity=n)
        tr._q[:n] = queries
        tr._phase[:n] = np.asarray(phases, dtype=np.uint8)
        tr._iter[:n] = 0 if iterations is None else np.asarray(iterations, dtype=np.uint32)
        tr._n = n
        return tr

    @property
    def queries(self) -> np.ndarray:
        return self._q[:self._n]

    @property
    def phases(self) -> np.ndarray:
        return self._phase[:self._n]

    @property
    def iterations(self) -> np.ndarray:
        return self._iter[:self._n]

    def __eq__(self, other) -> bool:
        if not isinstance(other, QueryTrace):
            return NotImplemented
        return (self.d == other.d and len(self) == len(other)
                and np.array_equal(self.queries, other.queries)
                and np.array_equal(self.phases, other.phases)
                and np.array_equal(self.iterations, other.iterations))

    def attack_mask(self) -> np.ndarray:
        return self.phases != Phase.INJECTED_BENIGN


def consumption_profile(trace: QueryTrace) -> dict[str, float]:
    """Fraction of queries spent in each phase (phases with zero share omitted)."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    counts = np.bincount(trace.phases, minlength=len(Phase))
    return {Phase(i).name: counts[i] / len(trace) for i in range(len(Phase)) if counts[i]}


def inject_benign(trace: QueryTrace, r_b: float, benign_pool: Dataset,
                  rng: Rng) -> QueryTrace:
    """Interleave ``round(r_b * n)`` benign queries at uniformly random positions.

    Attack records keep their relative order; benign images are drawn with
    :func:`benign_stream`.
    """
    if r_b < 0:
        raise ValueError("r_b must be >= 0")
    n = len(trace)
    k = int(round(r_b * n))
    if k == 0:
        return QueryTrace.from_arrays(trace.queries, trace.phases, trace.iterations)
    if len(benign_pool) == 0:
        raise ValueError("empty benign pool")
    total = n + k
    benign_slots = np.zeros(total, dtype=bool)
    benign_slots[rng.choice(total, size=k, replace=False)] = True
    pool_idx = _pool_indices(len(benign_pool), k, rng)
    q = np.empty((total, trace.d), dtype=np.float32)
    ph = np.empty(total, dtype=np.uint8)
    it = np.zeros(total, dtype=np.uint32)
    q[~benign_slots] = trace.queries
    ph[~benign_slots] = trace.phases
    it[~benign_slots] = trace.iterations
    q[benign_slots] = benign_pool.x[pool_idx]
    ph[benign_slots] = Phase.INJECTED_BENIGN
    return QueryTrace.from_arrays(q, ph, it)


def _pool_indices(pool_size: int, n: int, rng: Rng, min_gap: int = 256) -> np.ndarray:
    """Concatenated shuffled passes over the pool.

    No image repeats within a pass, and across a pass boundary an image is
    not reused within ``min_gap`` draws (capped at half the pool), so a
    short-memory consumer never sees the same image twice.
    """
    gap = min(min_gap, pool_size // 2)
    out = [rng.permutation(pool_size)]
    total = pool_size
    while total < n:
        nxt = rng.permutation(pool_size)
        if gap:
            recent = np.zeros(pool_size, dtype=bool)
            recent[out[-1][-gap:]] = True
            head_bad = np.flatnonzero(recent[nxt[:gap]])
            tail_ok = gap + np.flatnonzero(~recent[nxt[gap:]])
            swap = rng.choice(tail_ok, size=len(head_bad), replace=False)
            nxt[head_bad], nxt[swap] = nxt[swap], nxt[head_bad].copy()
        out.append(nxt)
        total += pool_size
    return np.concatenate(out)[:n]


def benign_stream(pool: Dataset, n: int, rng: Rng) -> QueryTrace:
    if len(pool) == 0:
        raise ValueError("empty benign pool")
    if n == 0:
        return QueryTrace(pool.d, capacity=1)
    idx = _pool_indices(len(pool), n, rng)
    return QueryTrace.from_arrays(pool.x[idx], np.full(n, Phase.OTHER, dtype=np.uint8))


def save_trace(trace: QueryTrace, path, sidecar: dict | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, trace.d, len(trace)))
        q = np.ascontiguousarray(trace.queries, dtype="<f4")
        for i in range(len(trace)):
            fh.write(_REC.pack(int(trace.phases[i]), int(trace.iterations[i])))
            fh.write(q[i].tobytes())
    if sidecar is not None:
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True))


def load_trace(path) -> QueryTrace:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TraceFormatError("truncated header")
    magic, version, d, n = _HEADER.unpack_from(data, 0)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != TRACE_VERSION:
        raise TraceFormatError(f"unsupported version {version}")
    rec = _REC.size + 4 * d
    if len(data) != _HEADER.size + n * rec:
        raise TraceFormatError("file size does not match record count")
    raw = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    phases = raw[:, 0].copy()
    iters = raw[:, 1:5].copy().view("<u4").reshape(n)
    queries = raw[:, 5:].copy().view("<f4").reshape(n, d)
    if phases.size and phases.max() >= len(Phase):
        raise TraceFormatError("unknown phase tag")
    return QueryTrace.from_arrays(queries, phases, iters)


def load_sidecar(path) -> dict:
    path = Path(path)
    return json.loads(path.with_suffix(path.suffix + ".json").read_text())
