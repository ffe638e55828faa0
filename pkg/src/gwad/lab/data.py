"""Synthetic image corpus standing in for CIFAR-style data.

Each image is a smooth class prototype plus per-image nuisance: a global
brightness shift, a contrast factor on the prototype, a few flat rectangles
with crisp edges, and faint pixel noise. The nuisance lives in a handful of
directions, which gives consecutive benign images the broad DS spread seen on
natural images; the rectangles give the edge screener something to key on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numkit import Rng


@dataclass
class Dataset:
    x: np.ndarray          # (n, d) float32 in [0, 1]
    y: np.ndarray          # (n,) int64
    shape: tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.shape)

    def split(self, frac: float, rng: Rng) -> tuple["Dataset", "Dataset"]:
        order = rng.permutation(len(self))
        cut = int(round(frac * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


def image_shape_for(d: int) -> tuple[int, int, int]:
    """Image geometry for a flat dimension: (s, s, 3), (s, s, 1) or (1, d, 1)."""
    if d % 3 == 0:
        s = int(round(np.sqrt(d // 3)))
        if s * s * 3 == d:
            return (s, s, 3)
    s = int(round(np.sqrt(d)))
    if s * s == d:
        return (s, s, 1)
    return (1, d, 1)


def _smooth_field(shape, rng: Rng, n_waves: int = 6, max_freq: int = 3) -> np.ndarray:
    h, w, c = shape
    ii, jj = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.zeros(shape)
    for ch in range(c):
        for _ in range(n_waves):
            fy, fx = rng.integers(0, max_freq + 1, 2)
            if fy == 0 and fx == 0:
                fx = 1
            phase = rng.uniform(0, 2 * np.pi)
            out[:, :, ch] += rng.normal() * np.cos(2 * np.pi * (fy * ii + fx * jj) + phase)
    out -= out.mean()
    return out / (out.std() + 1e-12)


def class_prototypes(n_classes: int, shape, rng: Rng) -> np.ndarray:
    return np.stack([_smooth_field(shape, rng) for _ in range(n_classes)])


def render(proto: np.ndarray, rng: Rng, *, amplitude: float = 0.04,
           brightness_sd: float = 0.17, n_shapes: tuple[int, int] = (2, 4),
           shape_level: tuple[float, float] = (0.15, 0.3),
           noise_sd: float = 0.01) -> np.ndarray:
    h, w, c = proto.shape
    img = 0.5 + rng.uniform(0.6, 1.4) * amplitude * proto
    img = img + rng.normal(0.0, brightness_sd)
    for _ in range(rng.integers(n_shapes[0], n_shapes[1] + 1)):
        rh = rng.integers(max(1, h // 6), max(2, h // 2) + 1)
        rw = rng.integers(max(1, w // 6), max(2, w // 2) + 1)
        r0 = rng.integers(0, max(1, h - rh + 1))
        c0 = rng.integers(0, max(1, w - rw + 1))
        level = rng.uniform(*shape_level) * rng.choice([-1.0, 1.0])
        tint = 1.0 + 0.2 * rng.standard_normal(c)
        img[r0:r0 + rh, c0:c0 + rw, :] += level * tint
    img += noise_sd * rng.standard_normal(img.shape)
    # keep pixels off the [0, 1] walls so small attack steps are never clipped
    return 0.05 + 0.9 * np.clip(img, 0.0, 1.0)


def make_synth_dataset(n_per_class: int, d: int, n_classes: int, rng: Rng,
                       **render_kw) -> Dataset:
    """Balanced labelled corpus of ``n_per_class * n_classes`` images in [0,1]^d."""
    if d < 512:
        raise ValueError("d must be >= 512")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    shape = image_shape_for(d)
    protos = class_prototypes(n_classes, shape, rng)
    xs = np.empty((n_per_class * n_classes, d), dtype=np.float32)
    ys = np.repeat(np.arange(n_classes), n_per_class)
    for k, label in enumerate(ys):
        xs[k] = render(protos[label], rng, **render_kw).reshape(-1)
    order = rng.permutation(len(ys))
    return Dataset(xs[order], ys[order].astype(np.int64), shape)
