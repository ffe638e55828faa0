"""Small fully-connected ReLU networks with a log-softmax head.

Used twice: as the desk-scale victim classifier and as the HoDS attack
classifier. Layers are stored as ``(fan_in, fan_out)`` matrices so a forward
step is ``h @ W + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numkit import Rng

WEIGHTS_MAGIC = b"GWNN"
WEIGHTS_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int | None = None):
        super().__init__(msg if epoch is None else f"{msg} (epoch {epoch})")
        self.epoch = epoch


class WeightsFormatError(ValueError):
    pass


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self, dtype=None) -> "Mlp":
        dt = dtype or self.weights[0].dtype
        return Mlp([w.astype(dt, copy=True) for w in self.weights],
                   [b.astype(dt, copy=True) for b in self.biases])

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_mlp(sizes: list[int], rng: Rng, dtype=np.float32) -> Mlp:
    """Kaiming-uniform weights, fan-in scaled uniform biases."""
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"bad layer sizes {sizes}")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        bb = 1.0 / np.sqrt(fan_in)
        bs.append(rng.uniform(-bb, bb, fan_out).astype(dtype))
    return Mlp(ws, bs)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(net: Mlp, x: np.ndarray, keep: bool = False):
    """Log-probabilities for a batch (or a single row).

    With ``keep=True`` also returns the post-activation inputs of every layer,
    which ``nll_grads`` needs for backprop.
    """
    h = np.asarray(x, dtype=net.weights[0].dtype)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.shape[1] != net.weights[0].shape[0]:
        raise ValueError(f"input has {h.shape[1]} features, network expects "
                         f"{net.weights[0].shape[0]}")
    acts = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0)
            acts.append(h)
    out = log_softmax(h)
    if single:
        out = out[0]
    return (out, acts) if keep else out


def nll_grads(net: Mlp, x: np.ndarray, y: np.ndarray):
    """Mean negative log-likelihood and its gradients for every layer."""
    logp, acts = forward(net, x, keep=True)
    n = logp.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    gws, gbs = [None] * len(net.weights), [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gws[i] = acts[i].T @ g
        gbs[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.weights[i].T) * (acts[i] > 0)
    return loss, gws, gbs


def train_sgd(net: Mlp, x: np.ndarray, y: np.ndarray, *, epochs: int,
              batch_size: int, lr: float, momentum: float, rng: Rng) -> list[float]:
    """Minibatch SGD with momentum, in place. Returns the per-epoch mean loss."""
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise ValueError("bad training hyperparameters")
    x = np.asarray(x, dtype=net.weights[0].dtype)
    y = np.asarray(y, dtype=np.int64)
    vw = [np.zeros_like(w) for w in net.weights]
    vb = [np.zeros_like(b) for b in net.biases]
    curve = []
    n = len(y)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, gws, gbs = nll_grads(net, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            total += loss * len(idx)
            for i in range(len(net.weights)):
                vw[i] = momentum * vw[i] + gws[i]
                vb[i] = momentum * vb[i] + gbs[i]
                net.weights[i] -= lr * vw[i]
                net.biases[i] -= lr * vb[i]
        curve.append(total / n)
    return curve


def predict(net: Mlp, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(net, x), axis=-1)


# -- GWNN weights file ------------------------------------------------------

def weights_nbytes(sizes: list[int]) -> int:
    body = sum(8 + 4 * (r * c + c) for r, c in zip(sizes[:-1], sizes[1:]))
    return 12 + body


def save_weights(net: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(net.weights)))
        for w, b in zip(net.weights, net.biases):
            rows, cols = w.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_weights(path, expect_sizes: list[int] | None = None) -> Mlp:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise WeightsFormatError("truncated header")
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {data[:4]!r}")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    off = 12
    ws, bs = [], []
    for _ in range(n_layers):
        if off + 8 > len(data):
            raise WeightsFormatError("truncated layer header")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        need = 4 * (rows * cols + cols)
        if off + need > len(data):
            raise WeightsFormatError("truncated layer body")
        w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off)
        off += 4 * rows * cols
        b = np.frombuffer(data, dtype="<f4", count=cols, offset=off)
        off += 4 * cols
        ws.append(w.reshape(rows, cols).astype(np.float32))
        bs.append(b.astype(np.float32))
    if off != len(data):
        raise WeightsFormatError("trailing bytes after last layer")
    for a, b in zip(ws[:-1], ws[1:]):
        if a.shape[1] != b.shape[0]:
            raise WeightsFormatError("layer dimensions do not chain")
    net = Mlp(ws, bs)
    if expect_sizes is not None and net.sizes != list(expect_sizes):
        raise WeightsFormatError(f"expected layers {expect_sizes}, file has {net.sizes}")
    return net
