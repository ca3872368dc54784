import numpy as np
import pytest

from poissonnet import shapes
from poissonnet.network import prepare_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_torus():
    return shapes.torus(12, 8, wobble=0.3)


@pytest.fixture(scope="session")
def small_ctx(small_torus):
    return prepare_mesh(small_torus)


def write_obj(path, text):
    path.write_text(text)
    return str(path)
