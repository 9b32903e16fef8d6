import numpy as np
import pytest

from fedkd import data, nn
from fedkd.protocol import ClientModel


def tiny_spec(shared=("Conv1", "FC3"), channels=2):
    """4x4x1 input, two convs (one strided), two dense layers."""
    layers = (
        nn.conv2d("Conv1", channels, 3), nn.relu("relu1"),
        nn.conv2d("Conv2", 2, 3, stride=2), nn.relu("relu2"),
        nn.flatten(), nn.dense("FC1", 3), nn.relu("relu_fc1"), nn.dense("FC3", 2),
    )
    return nn.ModelSpec((4, 4, 1), layers, frozenset(shared))


def linear_spec(shared=("FC",)):
    """A single Dense layer on a 1-feature input: logits = x * W + b."""
    return nn.ModelSpec((1,), (nn.dense("FC", 2),), frozenset(shared))


def scalar_spec(shared=("FC",)):
    """The linear model on a 1x1x1 input, so it can consume a Dataset of 1x1 clips."""
    return nn.ModelSpec((1, 1, 1), (nn.flatten(), nn.dense("FC", 2)), frozenset(shared))


def scalar_dataset(xs, ys, name="scalar"):
    return data.Dataset(np.asarray(xs, dtype=np.float64).reshape(-1, 1, 1), ys, name)


def make_client(spec, params, optimizer=nn.SGD, lr=0.1, client_id=0, seed=0):
    return ClientModel(client_id, spec, params, nn.make_optimizer(optimizer, params, lr), seed)


def tiny_dataset(n, seed, name="tiny"):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, 4, 4)) < 0.5).astype(np.float64)
    y = rng.integers(0, 2, n)
    y[0], y[-1] = 0, 1
    return data.Dataset(X, y, name)


@pytest.fixture
def tiny():
    return tiny_spec()


@pytest.fixture(scope="session")
def clips():
    return data.generate_synthetic(400, 0.2, 0)
