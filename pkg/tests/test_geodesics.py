import numpy as np
import pytest

from glance.geodesics import (
    FlowState,
    flow,
    flow_with_variationals,
    geodesic_field,
    hamiltonian,
    monodromy_symplectic_defect,
)
from glance.surfaces import frame_at, project_to_surface


def tangent_state(model, x0, seed, speed=1.0):
    x = project_to_surface(model, np.asarray(x0, dtype=float))
    fr = frame_at(model, x)
    t = fr.tangent_project(np.asarray(seed, dtype=float))
    return FlowState(x, speed * t / np.linalg.norm(t))


def test_field_great_circle(sphere):
    st = FlowState(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    dx, du = geodesic_field(sphere, st)
    assert np.allclose(dx, [0.0, 1.0, 0.0])
    assert np.allclose(du, [-1.0, 0.0, 0.0])


def test_field_zero_velocity(sphere):
    st = FlowState(np.array([1.0, 0.0, 0.0]), np.zeros(3))
    dx, du = geodesic_field(sphere, st)
    assert np.all(dx == 0.0) and np.all(du == 0.0)


def test_field_ellipsoid_curvature(ellipsoid):
    st = FlowState(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    _, du = geodesic_field(ellipsoid, st)
    assert np.allclose(du, (1.0 / 0.8**2) * np.array([-1.0, 0.0, 0.0]), rtol=1e-12)


def test_great_circle_quarter_turn(sphere):
    st = FlowState(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    end = flow(sphere, st, np.pi / 2, tol=1e-11)
    assert np.allclose(end.x, [0.0, 1.0, 0.0], atol=1e-9)
    assert np.allclose(end.u, [-1.0, 0.0, 0.0], atol=1e-9)


def test_zero_time_identity(ellipsoid):
    st = tangent_state(ellipsoid, [0.4, 0.5, 0.3], [0.3, -0.5, 0.8])
    end = flow(ellipsoid, st, 0.0)
    assert np.all(end.x == st.x) and np.all(end.u == st.u)


def test_principal_plane_invariant(ellipsoid):
    # the x3 = 0 section is a geodesic by symmetry
    st = tangent_state(ellipsoid, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    end = flow(ellipsoid, st, 5.0, tol=1e-11)
    assert abs(end.x[2]) < 1e-9 and abs(end.u[2]) < 1e-9


def test_energy_conservation(soft_bump_surface):
    st = tangent_state(soft_bump_surface, [0.4, 0.5, 0.3], [0.3, -0.5, 0.8])
    h0 = hamiltonian(soft_bump_surface, st.x, st.u)
    end = flow(soft_bump_surface, st, 10.0, tol=1e-10)
    h1 = hamiltonian(soft_bump_surface, end.x, end.u)
    assert abs(h1 - h0) <= 10 * 1e-10 * 10.0


def test_speed_homogeneity(ellipsoid):
    st1 = tangent_state(ellipsoid, [0.4, 0.5, 0.3], [0.3, -0.5, 0.8], speed=1.0)
    st2 = tangent_state(ellipsoid, [0.4, 0.5, 0.3], [0.3, -0.5, 0.8], speed=2.0)
    end1 = flow(ellipsoid, st1, 3.0, tol=1e-11)
    end2 = flow(ellipsoid, st2, 1.5, tol=1e-11)
    assert np.allclose(end1.x, end2.x, atol=1e-9)


def test_monodromy_identity_at_zero(ellipsoid):
    st = tangent_state(ellipsoid, [0.4, 0.5, 0.3], [0.3, -0.5, 0.8])
    _, mon = flow_with_variationals(ellipsoid, st, 0.0)
    assert np.allclose(mon, np.eye(6))


def test_great_circle_monodromy_unit_spectrum(sphere):
    # transverse multipliers via the cleaned quotient: the raw ambient
    # extension has constraint-transverse directions that are artifacts
    from glance.structures import transverse_map

    st = FlowState(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    _, mon = flow_with_variationals(sphere, st, 2 * np.pi, tol=1e-11)
    t_mat, _ = transverse_map(sphere, None, mon, x=st.x, u=st.u)
    eig = np.linalg.eigvals(t_mat)
    assert np.max(np.abs(np.abs(eig) - 1.0)) < 1e-6


def test_monodromy_symplectic_and_unimodular(soft_bump_surface):
    st = tangent_state(soft_bump_surface, [0.4, 0.5, 0.3], [0.3, -0.5, 0.8])
    _, mon = flow_with_variationals(soft_bump_surface, st, 2.0, tol=1e-11)
    assert monodromy_symplectic_defect(mon) < 1e-6
    assert abs(np.linalg.det(mon) - 1.0) < 1e-6


def test_monodromy_matches_fd_on_tangent_directions(ellipsoid):
    st = tangent_state(ellipsoid, [0.4, 0.5, 0.3], [0.3, -0.5, 0.8])
    T = 2.0
    _, mon = flow_with_variationals(ellipsoid, st, T, tol=1e-11)
    g = ellipsoid.grad(st.x)
    hu = ellipsoid.hess_vec(st.x, st.u)
    rows = np.stack([
        np.concatenate([g, np.zeros(3)]),
        np.concatenate([hu, g]),
    ])
    _, _, vt = np.linalg.svd(rows)
    tangent = vt[2:].T
    h = 1e-6
    y0 = np.concatenate([st.x, st.u])
    for j in range(tangent.shape[1]):
        dv = tangent[:, j]
        plus = flow(ellipsoid, FlowState(*np.split(y0 + h * dv, 2)), T, tol=1e-12)
        minus = flow(ellipsoid, FlowState(*np.split(y0 - h * dv, 2)), T, tol=1e-12)
        fd = (np.concatenate([plus.x, plus.u]) - np.concatenate([minus.x, minus.u])) / (2 * h)
        assert np.abs(mon @ dv - fd).max() < 1e-4
