from __future__ import annotations

import enum

import numpy as np

from ..nn import Mlp, forward, init_mlp, predict, train_sgd
from ..numkit import Rng
from .data import Dataset


class Mode(enum.Enum):
    SOFT = "soft"
    HARD = "hard"


class VictimModel:
    """Fully-connected softmax classifier with a query counter.

    ``query`` is the attacker-facing oracle and counts every call;
    ``accuracy`` and ``label_of`` are for the experimenter and do not.
    """

    def __init__(self, net: Mlp, shape: tuple[int, int, int]):
        self.net = net
        self.shape = tuple(shape)
        self.query_counter = 0

    @property
    def input_dim(self) -> int:
        return self.net.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.net.sizes[-1]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32).reshape(-1)
        if x.size != self.input_dim:
            raise ValueError(f"query has dimension {x.size}, model expects {self.input_dim}")
        return x

    def query(self, x, mode: Mode = Mode.SOFT):
        x = self._check(x)
        self.query_counter += 1
        logp = forward(self.net, x).astype(np.float64)
        if mode is Mode.HARD:
            return int(np.argmax(logp))
        return np.exp(logp)

    def label_of(self, x) -> int:
        return int(np.argmax(forward(self.net, self._check(x))))

    def accuracy(self, data: Dataset) -> float:
        if len(data) == 0:
            return float("nan")
        return float(np.mean(predict(self.net, data.x) == data.y))

    def clone(self) -> "VictimModel":
        return VictimModel(self.net.copy(), self.shape)


def oracle_query(model: VictimModel, x, mode: Mode = Mode.SOFT):
    return model.query(x, mode)


def train_victim(data: Dataset, epochs: int, rng: Rng, *, hidden: int = 64,
                 lr: float = 0.05, momentum: float = 0.9,
                 batch_size: int = 64) -> VictimModel:
    if len(data) == 0:
        raise ValueError("empty dataset")
    net = init_mlp([data.d, hidden, data.n_classes], rng)
    if epochs > 0:
        # centred inputs train much faster; fold the shift into the first bias
        train_sgd(net, data.x - 0.5, data.y, epochs=epochs, batch_size=batch_size,
                  lr=lr, momentum=momentum, rng=rng)
        net.biases[0] -= (0.5 * net.weights[0].sum(axis=0)).astype(net.biases[0].dtype)
    return VictimModel(net, data.shape)
