"""Numeric primitives shared by the attack lab, the monitor and the tests.

Every random draw in the package goes through a ``numpy.random.Generator``
backed by PCG64. Seeds are expanded with ``SeedSequence`` so that a stage name
plus an integer seed always yields the same stream on every platform.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

Rng = np.random.Generator


class UndefinedSimilarity(ValueError):
    """Cosine similarity requested for a zero-norm vector."""


def make_rng(seed: int, *keys: str | int) -> Rng:
    """PCG64 generator for ``seed``, optionally split by stage name keys.

    ``make_rng(7, "victim")`` and ``make_rng(7, "attacks")`` are independent
    streams; both are reproducible from the single integer seed.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        entropy.append(int(k) & 0xFFFFFFFF if isinstance(k, int) else zlib.crc32(k.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def cosine(a, b) -> float:
    """a.b / (|a| |b|), clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarity("cosine similarity of a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def sample_gaussian(d: int, mu: float, sigma: float, rng: Rng) -> np.ndarray:
    if d <= 0:
        raise ValueError("d must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        rng.standard_normal(d)  # keep the stream position independent of sigma
        return np.full(d, float(mu))
    return mu + sigma * rng.standard_normal(d)


@dataclass(frozen=True)
class ConcentrationStats:
    mean_norm_ratio: float
    mean_abs_cos: float
    tail_freq: float


def angle_tail_threshold(d: int) -> float:
    return float(np.sqrt(2.0 * np.log(d) / d))


def concentration_probe(d: int, n_samples: int, rng: Rng,
                        chunk: int = 256) -> ConcentrationStats:
    """Length and angle statistics of standard Gaussian vectors in R^d.

    Norms are measured on ``n_samples`` vectors; angles on every distinct
    pair among them. The tail frequency counts pairs whose |cos| reaches
    sqrt(2 ln d / d).
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    thr = angle_tail_threshold(d)
    u = rng.standard_normal((n_samples, d))
    norms = np.linalg.norm(u, axis=1)
    unit = u / norms[:, None]
    abs_cos_sum = 0.0
    tail = 0
    for start in range(0, n_samples, chunk):
        block = np.abs(np.clip(unit[start:start + chunk] @ unit.T, -1.0, 1.0))
        # keep only pairs (i, j) with j > i
        rows = np.arange(start, min(start + chunk, n_samples))[:, None]
        upper = np.arange(n_samples)[None, :] > rows
        abs_cos_sum += float(block[upper].sum())
        tail += int(np.count_nonzero(block[upper] >= thr))
    n_pairs = n_samples * (n_samples - 1) // 2
    return ConcentrationStats(
        mean_norm_ratio=float(norms.mean() / np.sqrt(d)),
        mean_abs_cos=abs_cos_sum / n_pairs,
        tail_freq=tail / n_pairs,
    )
