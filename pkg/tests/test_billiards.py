import numpy as np
import pytest

from glance.billiards import (
    BilliardEnsemble,
    PhasePoint,
    billiard_inverse,
    billiard_step,
    flight_time,
    orbit,
    random_states,
    symplectic_defect,
)
from glance.errors import GrazingState
from glance.surfaces import frame_at


def sphere_state():
    return PhasePoint(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.6, 0.0]))


def sphere_chord_oracle(p):
    """Closed-form unit-sphere bounce: tau = 2 sin(theta), mirror reflection."""
    x, u = p.x, p.u
    sn = np.sqrt(1.0 - u @ u)
    n = -x
    v = u + sn * n
    tau = 2.0 * sn
    x_new = x + tau * v
    n_new = -x_new
    u_new = v - (v @ n_new) * n_new
    return x_new, u_new, tau


def test_sphere_flight_time(sphere):
    assert flight_time(sphere, sphere_state()) == pytest.approx(1.6, abs=1e-12)


def test_sphere_reflection_closed_form(sphere):
    q, diag = billiard_step(sphere, sphere_state())
    assert np.allclose(q.x, [-7 / 25, 24 / 25, 0.0], atol=1e-12)
    assert np.allclose(q.u, [-72 / 125, -21 / 125, 0.0], atol=1e-12)
    assert np.linalg.norm(q.u) == pytest.approx(0.6, abs=1e-13)
    assert diag.tau == pytest.approx(1.6, abs=1e-12)


def test_inverse_recovers_reflection_example(sphere):
    q, _ = billiard_step(sphere, sphere_state())
    back = billiard_inverse(sphere, q)
    assert np.allclose(back.x, sphere_state().x, atol=1e-12)
    assert np.allclose(back.u, sphere_state().u, atol=1e-12)


def test_boundary_fixed_point(sphere):
    p = PhasePoint(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    assert flight_time(sphere, p) == 0.0
    q, diag = billiard_step(sphere, p)
    assert diag.grazing
    assert np.all(q.x == p.x) and np.all(q.u == p.u)


def test_grazing_raises(sphere):
    u = np.array([0.0, 1.0, 0.0]) * np.sqrt(1.0 - 1e-15)
    with pytest.raises(GrazingState):
        flight_time(sphere, PhasePoint(np.array([1.0, 0.0, 0.0]), u))


def test_flight_time_vs_bisection_oracle(ellipsoid):
    rng = np.random.default_rng(8)
    for p in random_states(ellipsoid, 20, rng):
        fr = frame_at(ellipsoid, p.x)
        sn = p.sin_theta
        v = p.u + sn * fr.n
        tau = flight_time(ellipsoid, p)
        lo, hi = 0.5 * tau, 2.0 * tau
        flo = ellipsoid.q(p.x + lo * v)
        while ellipsoid.q(p.x + hi * v) < 0:
            hi *= 1.5
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if ellipsoid.q(p.x + mid * v) < 0:
                lo = mid
            else:
                hi = mid
        assert tau == pytest.approx(0.5 * (lo + hi), abs=1e-10)


def test_ellipsoid_quadric_chord_oracle(ellipsoid):
    # exact quadratic root for the pure quadric
    rng = np.random.default_rng(9)
    inv_ax2 = 1.0 / np.asarray([1.0, 0.8, 0.6]) ** 2
    for p in random_states(ellipsoid, 20, rng):
        fr = frame_at(ellipsoid, p.x)
        v = p.u + p.sin_theta * fr.n
        a = np.sum(v * v * inv_ax2)
        b = 2.0 * np.sum(p.x * v * inv_ax2)
        tau_oracle = -b / a
        q, diag = billiard_step(ellipsoid, p)
        assert diag.tau == pytest.approx(tau_oracle, abs=1e-10)
        assert np.linalg.norm(q.u) < 1.0


def test_reversibility(ellipsoid):
    rng = np.random.default_rng(10)
    for p in random_states(ellipsoid, 25, rng):
        q, _ = billiard_step(ellipsoid, p)
        back = billiard_inverse(ellipsoid, q)
        err = max(np.abs(back.x - p.x).max(), np.abs(back.u - p.u).max())
        assert err < 1e-9


def test_orbit_tangency_and_prefix(sphere, ellipsoid):
    pts, diags, terminated = orbit(ellipsoid, sphere_state_on(ellipsoid), 200)
    assert not terminated
    assert len(pts) == 200
    assert max(d.tangency_defect for d in diags) < 1e-10
    # sphere conserves the angle exactly
    pts, diags, _ = orbit(sphere, sphere_state(), 100)
    sines = [p.sin_theta for p in pts]
    assert np.ptp(sines) < 1e-12


def sphere_state_on(model):
    from glance.surfaces import project_to_surface

    x = project_to_surface(model, np.array([0.4, 0.5, 0.3]))
    fr = frame_at(model, x)
    t = fr.tangent_project(np.array([0.3, -0.5, 0.8]))
    t /= np.linalg.norm(t)
    return PhasePoint(x, 0.8 * t)


def test_symplectic_defect(ellipsoid, sphere):
    rng = np.random.default_rng(12)
    for p in random_states(ellipsoid, 5, rng):
        assert symplectic_defect(ellipsoid, p, h=1e-5) < 1e-6
    for p in random_states(sphere, 3, rng):
        assert symplectic_defect(sphere, p, h=1e-5) < 1e-6


def test_batch_matches_scalar(soft_bump_surface):
    rng = np.random.default_rng(13)
    states = random_states(soft_bump_surface, 12, rng, sin_range=(0.05, 0.6))
    X = np.array([p.x for p in states])
    U = np.array([p.u for p in states])
    ens = BilliardEnsemble(soft_bump_surface, X, U)
    for step in range(5):
        ens.step()
        for i, p in enumerate(states):
            q, _ = billiard_step(soft_bump_surface, p)
            states[i] = q
            assert np.allclose(ens.X[i], q.x, atol=1e-9)
            assert np.allclose(ens.U[i], q.u, atol=1e-9)
