"""Edge-signature pre-filter that routes near-duplicate queries into DS channels.

Each query is reduced to a 32x32 binary Canny edge map packed into 128 bytes.
A query whose signature is close (XOR mismatch ratio below ``theta``) to one
of the last ``depth`` signatures is suspicious and joins that entry's
channel; only suspicious queries reach a DS monitor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .monitor import DEFAULT_WINDOW, DsMonitor

SIG_SIDE = 32
SIG_BYTES = SIG_SIDE * SIG_SIDE // 8


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.0
    low: float = 0.1      # fractions of the max gradient magnitude
    high: float = 0.3

    def __post_init__(self):
        if self.sigma < 0 or not 0 <= self.low <= self.high <= 1:
            raise ValueError("need sigma >= 0 and 0 <= low <= high <= 1")


def to_gray(image, shape) -> np.ndarray:
    h, w, c = shape
    img = np.asarray(image, dtype=np.float64)
    if img.size != h * w * c:
        raise ValueError(f"cannot reshape {img.size} values to {tuple(shape)}")
    img = img.reshape(h, w, c)
    if c == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img.mean(axis=2)


def resize_bilinear(gray: np.ndarray, side: int = SIG_SIDE) -> np.ndarray:
    h, w = gray.shape
    if (h, w) == (side, side):
        return gray.copy()
    # sample at pixel centres, as image libraries do
    ys = (np.arange(side) + 0.5) * h / side - 0.5
    xs = (np.arange(side) + 0.5) * w / side - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(gray, [yy, xx], order=1, mode="nearest")


def canny(gray: np.ndarray, params: CannyParams = CannyParams()) -> np.ndarray:
    """Binary edge map: Gaussian blur, Sobel, non-max suppression, hysteresis."""
    g = ndimage.gaussian_filter(np.asarray(gray, dtype=np.float64), params.sigma, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    top = mag.max()
    if top <= 1e-12:
        return np.zeros(gray.shape, dtype=bool)

    # quantize gradient direction to 0/45/90/135 degrees
    ang = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = (np.floor((ang + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    pad = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = pad[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= (sector == s) & (mag >= fwd) & (mag >= bwd)
    thin = np.where(keep, mag, 0.0)

    strong = thin >= params.high * top
    weak = thin >= params.low * top
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return strong
    hit = np.zeros(n + 1, dtype=bool)
    hit[labels[strong]] = True
    hit[0] = False
    return hit[labels]


def edge_signature(image, shape, params: CannyParams = CannyParams()) -> bytes:
    edges = canny(resize_bilinear(to_gray(image, shape)), params)
    return np.packbits(edges.reshape(-1)).tobytes()


def _bits(sig) -> np.ndarray:
    a = np.frombuffer(bytes(sig), dtype=np.uint8) if not isinstance(sig, np.ndarray) else sig
    return a


def mismatch_ratio(e0, ei) -> float:
    a, b = _bits(e0), _bits(ei)
    if a.shape != b.shape:
        raise ValueError("signature lengths differ")
    den = int(np.unpackbits(a).sum()) + int(np.unpackbits(b).sum())
    if den == 0:
        return 0.0
    return int(np.unpackbits(a ^ b).sum()) / den


def mismatch_ratios(e0, many: np.ndarray) -> np.ndarray:
    """Ratio of one signature against a (k, 128) uint8 stack."""
    a = _bits(e0)
    pa = int(np.unpackbits(a).sum())
    pm = np.unpackbits(many, axis=1).sum(axis=1)
    px = np.unpackbits(many ^ a, axis=1).sum(axis=1)
    den = pm + pa
    return np.where(den == 0, 0.0, px / np.maximum(den, 1))


@dataclass(frozen=True)
class ScreenVerdict:
    suspicious: bool
    channel_id: int | None = None
    best_ratio: float | None = None


class Screener:
    def __init__(self, shape, theta: float = 0.30, depth: int = 100,
                 window: int = DEFAULT_WINDOW, canny_params: CannyParams = CannyParams()):
        if not 0 < theta < 1:
            raise ValueError("theta must be in (0, 1)")
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.shape = tuple(shape)
        self.theta = float(theta)
        self.depth = int(depth)
        self.window = int(window)
        self.canny_params = canny_params
        self._sigs = np.zeros((self.depth, SIG_BYTES), dtype=np.uint8)
        self._cids = np.full(self.depth, -1, dtype=np.int64)
        self._queries: list = [None] * self.depth
        self._pos = np.zeros(self.depth, dtype=np.int64)
        self._count = 0          # total pushes; ring slot = count % depth
        self.next_cid = 0
        self.monitors: dict[int, DsMonitor] = {}
        self.channel_ds: dict[int, list[float]] = {}
        self.channel_pos: dict[int, list[int]] = {}   # stream index behind each DS value
        self._channel_counts: dict[int, int] = {}

    @property
    def fifo_len(self) -> int:
        return min(self._count, self.depth)

    def _new_cid(self) -> int:
        cid = self.next_cid
        self.next_cid += 1
        return cid

    def _feed(self, cid: int, q, pos: int) -> None:
        ds = self.monitors[cid].push(q)
        if ds is not None:
            self.channel_ds[cid].append(ds)
            self.channel_pos[cid].append(pos)
        self._channel_counts[cid] = self._channel_counts.get(cid, 0) + 1

    def push(self, query) -> ScreenVerdict:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.size != int(np.prod(self.shape)):
            raise ValueError("query does not match the screener's image geometry")
        sig = np.frombuffer(edge_signature(q, self.shape, self.canny_params), dtype=np.uint8)
        n = self.fifo_len
        verdict = ScreenVerdict(False)
        cid = -1
        if n:
            # ring slots ordered oldest -> newest
            order = (np.arange(self._count - n, self._count)) % self.depth
            ratios = mismatch_ratios(sig, self._sigs[order])
            best = float(ratios.min())
            if best < self.theta:
                # most recent among the minima
                j = order[np.flatnonzero(ratios == best)[-1]]
                cid = int(self._cids[j])
                if cid < 0:
                    cid = self._cids[j] = self._new_cid()
                if cid not in self.monitors:
                    # channel goes live: its origin query opens the DS stream
                    self.monitors[cid] = DsMonitor(self.window)
                    self.channel_ds[cid] = []
                    self.channel_pos[cid] = []
                    self._feed(cid, self._queries[j], int(self._pos[j]))
                self._feed(cid, q, self._count)
                verdict = ScreenVerdict(True, cid, best)
            else:
                verdict = ScreenVerdict(False, None, best)
        slot = self._count % self.depth
        self._sigs[slot] = sig
        self._cids[slot] = cid         # -1: cid reserved lazily on first match
        self._queries[slot] = q
        self._pos[slot] = self._count
        self._count += 1
        return verdict

    def channels(self) -> dict[int, int]:
        """cid -> number of queries routed into that channel's DS monitor."""
        return dict(sorted(self._channel_counts.items()))

    def channel_hods(self, cid: int) -> np.ndarray:
        return self.monitors[cid].hods()


def screen_push(state: Screener, query) -> ScreenVerdict:
    return state.push(query)


def screener_channels(state: Screener) -> dict[int, int]:
    return state.channels()


def dump_signatures(images, shape, path, params: CannyParams = CannyParams()) -> None:
    with open(path, "w") as fh:
        for img in images:
            fh.write(edge_signature(img, shape, params).hex() + "\n")
