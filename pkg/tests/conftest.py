"""
    Shared fixtures for the swept_sdf test suite.

    Read more about conftest.py under:
    - https://docs.pytest.org/en/stable/fixture.html
    - https://docs.pytest.org/en/stable/writing_plugins.html
"""

import numpy as np
import pytest

from swept_sdf.geometry import MeshDistanceIndex, TriangleMesh, make_box, make_icosphere
from swept_sdf.sweep import MotionOracle
from swept_sdf.trajectory import BoundaryState, Trajectory, minco_construct

SPHERE_RADIUS = 0.5


def translation(start, velocity, duration=1.0):
    """Straight-line motion ``p(t) = start + velocity * t`` as a one-piece trajectory."""
    coeffs = np.zeros((1, 6, 3))
    coeffs[0, 0] = start
    coeffs[0, 1] = velocity
    return Trajectory.from_coefficients(coeffs, [duration])


def union_mesh(*parts):
    """Disjoint union of closed meshes, each already outward-oriented."""
    offsets = np.cumsum([0] + [len(part.vertices) for part in parts[:-1]])
    return TriangleMesh(
        np.vstack([part.vertices for part in parts]),
        np.vstack([part.faces + offset for part, offset in zip(parts, offsets)]),
    )


def capsule_sdf(points, a, b, radius):
    """Exact SDF of the capsule with axis ``a``-``b``."""
    points = np.atleast_2d(points)
    axis = np.asarray(b, dtype=float) - a
    s = np.clip((points - a) @ axis / (axis @ axis), 0.0, 1.0)
    return np.linalg.norm(points - (a + s[:, None] * axis), axis=1) - radius


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def cube():
    return make_box((1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def cube_index(cube):
    return MeshDistanceIndex(cube)


@pytest.fixture(scope="session")
def sphere():
    """Subdivision-3 icosphere of radius 0.5 about the origin."""
    return make_icosphere(3, SPHERE_RADIUS)


@pytest.fixture(scope="session")
def sphere_index(sphere):
    return MeshDistanceIndex(sphere)


@pytest.fixture(scope="session")
def unit_sphere_index():
    return MeshDistanceIndex(make_icosphere(3, 1.0))


@pytest.fixture
def sliding_motion():
    """Body translating from x = 0 to x = 1 in one second without tilting."""
    return MotionOracle(translation((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)))


@pytest.fixture
def random_minco(rng):
    """Three-piece trajectory with random waypoints, durations and end states."""
    start = BoundaryState(rng.normal(size=3), 0.3 * rng.normal(size=3), 0.3 * rng.normal(size=3))
    end = BoundaryState(rng.normal(size=3) + 3.0, 0.3 * rng.normal(size=3), 0.3 * rng.normal(size=3))
    waypoints = np.linspace(start.position, end.position, 4)[1:-1] + 0.2 * rng.normal(size=(2, 3))
    durations = rng.uniform(0.8, 1.5, size=3)
    return minco_construct(waypoints, durations, start, end)
