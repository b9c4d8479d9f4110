import numpy as np
import pytest

from ctbench.grids import ProjectionGeometry
from ctbench.operators import Projector


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_geometry():
    """Twelve views over 180 degrees, 24 detector bins of unit pitch."""
    return ProjectionGeometry(np.pi * np.arange(12) / 12, 24, 1.0)


@pytest.fixture
def small_projector(small_geometry):
    return Projector(small_geometry, (16, 16), 1.0)


def dense_matrix(proj: Projector) -> np.ndarray:
    """Explicit matrix of a projector, one column per image pixel."""
    cols = np.empty((proj.n_rays, proj.n_pixels))
    basis = np.zeros((proj.height, proj.width))
    for j in range(proj.n_pixels):
        basis.ravel()[j] = 1.0
        cols[:, j] = proj.apply(basis).ravel()
        basis.ravel()[j] = 0.0
    return cols
