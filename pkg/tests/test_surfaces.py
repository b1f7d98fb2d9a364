import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glance.errors import ConvexityLost, DegenerateGradient, NotOnSurface
from glance.surfaces import (
    BumpSpec,
    Ellipsoid,
    PerturbedSurface,
    Sphere,
    check_convexity,
    frame_at,
    perturbed_surface,
    project_to_surface,
    tangent_project,
)

A, B, C = 1.0, 0.8, 0.6


def surface_points(model, n, seed=0):
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(n):
        d = rng.normal(size=model.dim)
        pts.append(project_to_surface(model, 1.1 * d / np.linalg.norm(d)))
    return pts


def test_sphere_frame_basics(sphere):
    fr = frame_at(sphere, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(fr.n, [-1.0, 0.0, 0.0])
    assert fr.grad_norm == pytest.approx(1.0)
    assert np.allclose(fr.curvature, np.eye(3))


def test_ellipsoid_principal_curvature(ellipsoid):
    # normal curvature at the major-axis endpoint, middle-axis direction
    fr = frame_at(ellipsoid, np.array([A, 0.0, 0.0]))
    u = np.array([0.0, 1.0, 0.0])
    assert fr.kappa(u) == pytest.approx(A / B**2, rel=1e-13)


def test_sphere_cubic_forms_vanish(sphere):
    fr = frame_at(sphere, np.array([0.0, 0.0, 1.0]))
    v = np.array([0.3, -1.2, 0.7])
    assert fr.third_form(v) == 0.0
    assert np.all(fr.third_form_vector(v) == 0.0)


def test_cubic_pairing_identity(soft_bump_surface):
    rng = np.random.default_rng(3)
    for x in surface_points(soft_bump_surface, 100, seed=5):
        fr = frame_at(soft_bump_surface, x)
        v = rng.normal(size=3)
        assert fr.third_form_vector(v) @ v == pytest.approx(fr.third_form(v), abs=1e-14)


def test_projection_examples(sphere, ellipsoid):
    assert np.allclose(project_to_surface(sphere, np.array([2.0, 0.0, 0.0])),
                       [1.0, 0.0, 0.0])
    assert np.allclose(project_to_surface(sphere, np.array([0.5, 0.0, 0.0])),
                       [1.0, 0.0, 0.0])
    x = project_to_surface(ellipsoid, np.array([0.3, 0.5, 0.2]))
    # near the surface the gradient foot-point agrees with the scaled seed
    # quadratically in the offset
    assert np.allclose(project_to_surface(ellipsoid, (1 + 1e-6) * x), x, atol=1e-10)
    # contract: on the level set, displacement parallel to the local gradient
    far = project_to_surface(ellipsoid, 1.01 * x)
    assert abs(ellipsoid.q(far)) <= ellipsoid.on_surface_tol
    d = far - 1.01 * x
    g = ellipsoid.grad(far)
    cosang = abs(d @ g) / (np.linalg.norm(d) * np.linalg.norm(g))
    # parallel to first order; the damped-Newton path curves with the gradient
    assert cosang > 1.0 - 1e-4


def test_frame_rejects_off_surface(ellipsoid):
    with pytest.raises(NotOnSurface):
        frame_at(ellipsoid, np.array([1.1, 0.0, 0.0]))


def test_tangent_project(sphere):
    fr = frame_at(sphere, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(tangent_project(fr, fr.n), 0.0)
    w = np.array([0.0, 0.4, -0.2])
    assert np.allclose(tangent_project(fr, w), w)
    assert np.allclose(tangent_project(fr, np.array([1.0, 1.0, 0.0])), [0.0, 1.0, 0.0])


def test_perturbed_zero_eps_identical(ellipsoid):
    bump = BumpSpec(center=[0.2, 0.1, 0.5], width=0.3, amplitude=2.0,
                    tilt=[0.1, 0.0, -0.2])
    pert = perturbed_surface(ellipsoid, (bump,), (0.0, 0.0))
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=3)
        assert pert.q(x) == ellipsoid.q(x)
        assert np.all(pert.grad(x) == ellipsoid.grad(x))
        assert np.all(pert.hess(x) == ellipsoid.hess(x))


def test_perturbed_linearity(ellipsoid):
    bump = BumpSpec(center=[0.2, 0.1, 0.5], width=0.3, amplitude=1.0,
                    tilt=[0.0, 0.0, 0.0])
    pert = perturbed_surface(ellipsoid, (bump,), (1e-3, 0.0))
    x0 = np.asarray(bump.center)
    assert pert.q(x0) - ellipsoid.q(x0) == pytest.approx(1e-3 * bump.value(x0), rel=1e-12)


def test_derivatives_match_finite_differences(soft_bump_surface):
    rng = np.random.default_rng(11)
    h = 1e-5
    model = soft_bump_surface
    for _ in range(20):
        x = rng.normal(size=3)
        v = rng.normal(size=3)
        g = model.grad(x)
        H_v = model.hess_vec(x, v)
        t_vv = model.third_vv(x, v)
        fd_g = np.array([
            (model.q(x + h * e) - model.q(x - h * e)) / (2 * h) for e in np.eye(3)
        ])
        assert np.allclose(fd_g, g, rtol=1e-6, atol=1e-9)
        fd_Hv = (model.grad(x + h * v) - model.grad(x - h * v)) / (2 * h)
        assert np.allclose(fd_Hv, H_v, rtol=1e-6, atol=1e-8)
        fd_tvv = (model.hess_vec(x + h * v, v) - model.hess_vec(x - h * v, v)) / (2 * h)
        assert np.allclose(fd_tvv, t_vv, rtol=1e-5, atol=1e-6)


def test_batched_evaluators_match_scalar(soft_bump_surface):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(17, 3))
    V = rng.normal(size=(17, 3))
    model = soft_bump_surface
    qs = model.q(X)
    gs = model.grad(X)
    hvs = model.hess_vec(X, V)
    for i in range(len(X)):
        assert qs[i] == pytest.approx(model.q(X[i]), rel=1e-15, abs=1e-300)
        assert np.allclose(gs[i], model.grad(X[i]))
        assert np.allclose(hvs[i], model.hess_vec(X[i], V[i]))


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(-0.8, 0.8))
def test_bump_strictly_positive(a, b, c):
    bump = BumpSpec(center=[0.1, -0.2, 0.3], width=0.4, amplitude=0.7,
                    tilt=[1.0, -2.0, 0.5])
    assert bump.value(np.array([a, b, c])) > 0.0


def test_convexity_check(ellipsoid, separatrix):
    assert check_convexity(ellipsoid, 50) > 0
    x0, w0 = separatrix.state_at(0.0)
    wild = BumpSpec(center=x0, width=0.02, amplitude=1.0, tilt=0.2 * w0, channel=1)
    with pytest.raises(ConvexityLost):
        check_convexity(PerturbedSurface(ellipsoid, (wild,), (5e-3, 0.0)), 30)


def test_frame_invariants_random(soft_bump_surface):
    rng = np.random.default_rng(4)
    for x in surface_points(soft_bump_surface, 30, seed=7):
        fr = frame_at(soft_bump_surface, x)
        assert np.linalg.norm(fr.n) == pytest.approx(1.0, abs=1e-13)
        assert np.allclose(fr.curvature, fr.curvature.T)
        t = fr.tangent_project(rng.normal(size=3))
        if np.linalg.norm(t) > 1e-8:
            assert fr.kappa(t) > 0.0
