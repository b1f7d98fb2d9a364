import numpy as np
import pytest

from glance.billiards import PhasePoint
from glance.structures import _trace_homoclinic, find_closed_geodesic
from glance.surfaces import BumpSpec, Ellipsoid, PerturbedSurface, Sphere

SEMI_AXES = (1.0, 0.8, 0.6)


@pytest.fixture(scope="session")
def sphere():
    return Sphere()


@pytest.fixture(scope="session")
def ellipsoid():
    return Ellipsoid(SEMI_AXES)


@pytest.fixture(scope="session")
def soft_bump_surface(ellipsoid):
    """Mildly bumped ellipsoid: nonzero third derivatives everywhere useful."""
    bump = BumpSpec(center=[0.1, 0.75, 0.35], width=0.55, amplitude=1.0,
                    tilt=[0.3, -0.2, 0.1], channel=1)
    return PerturbedSurface(ellipsoid, (bump,), eps=(0.05, 0.0))


@pytest.fixture(scope="session")
def gamma_sphere(sphere):
    seed = PhasePoint(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    return find_closed_geodesic(sphere, seed, tol=1e-10)


@pytest.fixture(scope="session")
def gamma_ellipsoid(ellipsoid):
    seed = PhasePoint(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    return find_closed_geodesic(ellipsoid, seed, tol=1e-11)


@pytest.fixture(scope="session")
def separatrix(ellipsoid, gamma_ellipsoid):
    """Traced separatrix orbit of the integrable ellipsoid (doubled case)."""
    return _trace_homoclinic(ellipsoid, gamma_ellipsoid, 1.702, 1e-5, 1e-11)


@pytest.fixture(scope="session")
def channel_bump(separatrix):
    """Narrow single-domain bump at the excursion's far point."""
    x0, w0 = separatrix.state_at(0.0)
    return BumpSpec(center=x0, width=0.0065, amplitude=1.0, tilt=0.75 * w0, channel=1)


@pytest.fixture(scope="session")
def drift_bump(separatrix):
    """Wider bump used by the diffusion experiments."""
    x0, w0 = separatrix.state_at(0.0)
    return BumpSpec(center=x0, width=0.02, amplitude=1.0, tilt=0.75 * w0, channel=1)
