import numpy as np
import pytest

from meshsplat.mesh import TriangleMesh, make_grid_cube, make_icosphere


@pytest.fixture
def unit_cube():
    """Unit cube [0,1]^3, 12 facets, outward winding."""
    vertices = np.array([
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ], dtype=np.float64)
    facets = np.array([
        (0, 2, 1), (0, 3, 2),   # z = 0
        (4, 5, 6), (4, 6, 7),   # z = 1
        (0, 1, 5), (0, 5, 4),   # y = 0
        (2, 3, 7), (2, 7, 6),   # y = 1
        (1, 2, 6), (1, 6, 5),   # x = 1
        (3, 0, 4), (3, 4, 7),   # x = 0
    ])
    return TriangleMesh(vertices, facets)


@pytest.fixture
def small_sphere():
    return make_icosphere(80, radius=1.0)


@pytest.fixture
def colored_cube():
    return make_grid_cube(divisions=2, half_extent=1.0, position_colors=True)
