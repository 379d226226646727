import os

import numpy as np
import pytest

from pcbf.barrier import ObstacleField, constant_controller, halfspace_barrier, obstacle_barrier, saturated_proportional
from pcbf.dynamics import make_double_integrator

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIOS = os.path.join(ROOT, "scenarios")


@pytest.fixture
def scalar():
    """Scalar example: h(z) = z, k(z) = -1/2, alpha = 1, alpha_x = 2, slow tracking."""
    return make_double_integrator(1, 1.0), halfspace_barrier(1.0, 2.0), constant_controller(-0.5)


@pytest.fixture
def obstacle():
    sys = make_double_integrator(2, 1.0)
    b = obstacle_barrier(ObstacleField([[-2.5, 0.0]], [1.0]), 2.0, 3.0)
    return sys, b, saturated_proportional(1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
