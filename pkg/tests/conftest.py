import numpy as np
import pytest

from actionlab import TimeGrid, catalog


@pytest.fixture(scope="session")
def grid200():
    return TimeGrid(200)


@pytest.fixture(scope="session")
def grid192():
    # divisible by every block count used by the delay/endpoint operators
    return TimeGrid(192)


@pytest.fixture(scope="session")
def bm_small(grid200):
    return catalog.build_law("brownian", grid200, 4000, seed=101)


@pytest.fixture(scope="session")
def bm_mid(grid200):
    return catalog.build_law("brownian", grid200, 20000, seed=102)


@pytest.fixture(scope="session")
def bm192(grid192):
    return catalog.build_law("brownian", grid192, 4000, seed=103)


@pytest.fixture(scope="session")
def pinned_mid(grid200):
    return catalog.build_law("pinned_brownian", grid200, 20000, seed=104, y=1.0)


@pytest.fixture(scope="session")
def squared_mid(grid200):
    return catalog.build_law("squared_increment", grid200, 20000, seed=105)


def deterministic_law(grid, n_paths=1500, drift_value=None):
    """Point law with zero diffusion and a deterministic time-dependent drift."""
    from actionlab.paths import SemimartingaleModel, simulate

    if drift_value is None:
        drift_value = lambda t: np.cos(t)

    def drift(j, prefix):
        return np.full((prefix.shape[0], 1), drift_value(j * grid.dt))

    model = SemimartingaleModel(
        name="deterministic", dim=1,
        initial_sampler=catalog.point_sampler(np.zeros(1)),
        drift=drift, diffusion_factor=np.zeros((1, 1)))
    return simulate(model, grid, n_paths, seed=9)
