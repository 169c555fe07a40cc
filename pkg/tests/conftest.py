import time
from dataclasses import dataclass

import numpy as np
import pytest

from octsphere.data import Dataset, make_synthetic_dataset
from octsphere.network import Network, NetworkConfig
from octsphere.training import TrainConfig, train
from oracles import ACCEPTANCE_LINES

DESK_TRAIN, DESK_TEST, DESK_POINTS = 500, 100, 512


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def octant_points():
    """One point in each octant of [-1, 1]^3."""
    return np.array([[x, y, z] for z in (-0.5, 0.5) for y in (-0.5, 0.5) for x in (-0.5, 0.5)])


@dataclass
class DeskRun:
    net: Network
    history: list
    seconds: float
    test_set: Dataset


def _first(ds, n):
    return Dataset(ds.clouds[:n], ds.labels[:n], ds.split)


@pytest.fixture(scope="session")
def desk_scale_run():
    """The synthetic sphere/cube/torus task trained once with the default config."""
    train_set = _first(make_synthetic_dataset(n_per_class=167, points_per_cloud=DESK_POINTS, seed=0),
                       DESK_TRAIN).normalized()
    test_set = _first(make_synthetic_dataset(n_per_class=34, points_per_cloud=DESK_POINTS, seed=1, split="test"),
                      DESK_TEST).normalized()
    net = Network(NetworkConfig(num_classes=3, mlp_channels=16, octree_channels=(32, 32, 64, 64)),
                  np.random.default_rng(0))
    start = time.perf_counter()
    history = train(net, train_set, TrainConfig(), test_set)
    return DeskRun(net, history, time.perf_counter() - start, test_set)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[0].strip("["))):
            terminalreporter.write_line(line)
