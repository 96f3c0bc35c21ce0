import numpy as np
import pytest

from critcascade.offspring import gaussian_boundary_model, lattice_boundary_model
from critcascade.walk import associated_walk, build_renewal


@pytest.fixture(scope="session")
def lattice():
    law = lattice_boundary_model()
    walk = associated_walk(law)
    return law, walk, build_renewal(walk, u_max=400.0)


@pytest.fixture(scope="session")
def gaussian():
    law = gaussian_boundary_model()
    walk = associated_walk(law)
    return law, walk, build_renewal(walk, u_max=400.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
