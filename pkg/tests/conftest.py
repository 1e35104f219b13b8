import math

import pytest

from core.mesh import build_cartesian_mesh, distort_taylor_green
from core.transport import TransportProblem, build_angular_quadrature, isotropic


@pytest.fixture
def square_mesh():
    return build_cartesian_mesh(2, 2)


@pytest.fixture
def rect_mesh():
    return build_cartesian_mesh(3, 2, (0.0, 1.5, 0.0, 1.0))


@pytest.fixture
def curved_mesh():
    """Quadratic 3×3 mesh of the unit square, bent by a short Taylor–Green flow."""
    return distort_taylor_green(build_cartesian_mesh(3, 3, m=2), 0.1, 10, cell_scaled=True)


@pytest.fixture
def quad():
    return build_angular_quadrature(2, 4)


@pytest.fixture
def scattering_problem(square_mesh, quad):
    return TransportProblem(square_mesh, 1, quad, 1.0, 0.5, source=isotropic(1.0), inflow=isotropic(0.1 / math.pi))
