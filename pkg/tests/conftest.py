import numpy as np
import pytest

from ugcn3d.topology import build_topology, default_rest_positions, default_topology


@pytest.fixture(scope="session")
def h36m():
    return default_topology()


@pytest.fixture(scope="session")
def rest17():
    return default_rest_positions()


@pytest.fixture
def chain3():
    return build_topology([-1, 0, 1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
