import numpy as np
import pytest

from fracmle import HurstVector, lift, sample_fbm


@pytest.fixture(scope="session")
def h04():
    return HurstVector((0.4,))


def sampled_lift(hurst, grid, seed):
    return lift(sample_fbm(hurst, grid, seed), grid)


def trapezoid_weights(grid):
    w = np.full(grid.n_coarse + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w
