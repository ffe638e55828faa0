import numpy as np
import pytest

from gwad.lab import make_synth_dataset, train_victim
from gwad.numkit import make_rng


@pytest.fixture(scope="session")
def small_world():
    """768-dim (16x16x3) corpus and a trained victim, shared by the fast tests."""
    data = make_synth_dataset(40, 768, 5, make_rng(11, "data"))
    train, test = data.split(0.7, make_rng(11, "split"))
    victim = train_victim(train, 15, make_rng(11, "victim"))
    return {"data": data, "train": train, "test": test, "victim": victim}


@pytest.fixture
def rng():
    return make_rng(1234)


def correct_index(world, start=0):
    v, test = world["victim"], world["test"]
    for i in range(start, len(test)):
        if v.label_of(test.x[i]) == test.y[i]:
            return i
    raise RuntimeError("no correctly classified test image")


@pytest.fixture(scope="session")
def cifar_world():
    """Full 32x32x3 geometry with a test pool larger than the screener FIFO."""
    data = make_synth_dataset(60, 3072, 10, make_rng(12, "data"))
    train, test = data.split(0.5, make_rng(12, "split"))
    victim = train_victim(train, 10, make_rng(12, "victim"))
    return {"data": data, "train": train, "test": test, "victim": victim}
