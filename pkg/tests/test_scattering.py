import numpy as np
import pytest

from glance.billiards import PhasePoint, billiard_step, random_states
from glance.errors import GrazingState, SupportViolation
from glance.scattering import (
    asymptotic_phase,
    check_bump_support,
    fiber_state,
    melnikov_G,
    perturbation_frame,
    perturbation_hamiltonian,
    scattering_map,
    snap_tau_star,
    symplectic_density,
)
from glance.structures import CylinderPoint
from glance.surfaces import BumpSpec, PerturbedSurface, frame_at


def test_snap_tau_star():
    assert snap_tau_star(0.05) == (1 / 20, 20)
    assert snap_tau_star(0.049) == (1 / 20, 20)
    assert snap_tau_star(1 / 32) == (1 / 32, 32)


def arrival_state(model, rng):
    p = random_states(model, 1, rng, sin_range=(0.2, 0.8))[0]
    q, _ = billiard_step(model, p)
    return p, q


def test_perturbation_frame_matches_map_derivative(ellipsoid):
    rng = np.random.default_rng(21)
    p, q = arrival_state(ellipsoid, rng)
    bump = BumpSpec(center=q.x, width=0.1, amplitude=1.0, tilt=rng.normal(size=3) * 0.3)
    assert bump.value(p.x) < 1e-12 * bump.max_value()
    frame = perturbation_frame(ellipsoid, bump, q)
    de = 1e-7
    outs = []
    for sign in (1.0, -1.0):
        pert = PerturbedSurface(ellipsoid, (bump,), (sign * de, 0.0))
        qq, _ = billiard_step(pert, p)
        outs.append(qq)
    dx = (outs[0].x - outs[1].x) / (2 * de)
    du = (outs[0].u - outs[1].u) / (2 * de)
    fr = frame_at(ellipsoid, q.x)
    sn = q.sin_theta
    v_in = q.u - sn * fr.n
    assert np.allclose(dx, frame.flight_time_rate * v_in, rtol=1e-5, atol=1e-7)
    assert np.allclose(du, frame.velocity_rate, rtol=1e-5, atol=1e-7)
    assert abs(frame.normal_rate @ fr.n) < 1e-10


def test_zero_bump_gives_zero_frame(ellipsoid):
    rng = np.random.default_rng(22)
    _, q = arrival_state(ellipsoid, rng)
    bump = BumpSpec(center=[0.0, 0.0, 3.0], width=0.05, amplitude=1e-300,
                    tilt=[0.0, 0.0, 0.0])
    frame = perturbation_frame(ellipsoid, bump, q)
    assert frame.flight_time_rate == pytest.approx(0.0, abs=1e-200)
    assert np.allclose(frame.velocity_rate, 0.0, atol=1e-200)


def test_hamiltonian_relations(ellipsoid):
    """dH/du = Theta v and -dH/dx = Pi against central differences."""
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(20):
        _, q = arrival_state(ellipsoid, rng)
        bump = BumpSpec(center=q.x, width=0.12, amplitude=1.0,
                        tilt=rng.normal(size=3) * 0.3)
        frame = perturbation_frame(ellipsoid, bump, q)
        fr = frame_at(ellipsoid, q.x)
        v_in = q.u - q.sin_theta * fr.n
        h = 1e-6
        dH_du = np.array([
            (perturbation_hamiltonian(ellipsoid, bump, q.x, q.u + h * e)
             - perturbation_hamiltonian(ellipsoid, bump, q.x, q.u - h * e)) / (2 * h)
            for e in np.eye(3)
        ])
        dH_dx = np.array([
            (perturbation_hamiltonian(ellipsoid, bump, q.x + h * e, q.u)
             - perturbation_hamiltonian(ellipsoid, bump, q.x - h * e, q.u)) / (2 * h)
            for e in np.eye(3)
        ])
        ref = frame.flight_time_rate * v_in
        worst = max(worst, np.abs(dH_du - ref).max() / max(np.abs(ref).max(), 1e-30))
        worst = max(worst, np.abs(-dH_dx - frame.velocity_rate).max()
                    / max(np.abs(frame.velocity_rate).max(), 1e-30))
    assert worst < 1e-5


def test_on_shell_hamiltonian_value(ellipsoid):
    rng = np.random.default_rng(24)
    _, q = arrival_state(ellipsoid, rng)
    bump = BumpSpec(center=q.x, width=0.12, amplitude=1.0, tilt=[0.1, 0.0, -0.2])
    fr = frame_at(ellipsoid, q.x)
    val = perturbation_hamiltonian(ellipsoid, bump, q.x, q.u)
    assert val == pytest.approx(float(bump.value(q.x)) * q.sin_theta / fr.grad_norm,
                                rel=1e-12)


def test_grazing_frame_raises(ellipsoid):
    rng = np.random.default_rng(25)
    p = random_states(ellipsoid, 1, rng)[0]
    with pytest.raises(GrazingState):
        perturbation_frame(
            ellipsoid,
            BumpSpec(center=p.x, width=0.1, amplitude=1.0, tilt=[0, 0, 0]),
            PhasePoint(p.x, p.u / np.linalg.norm(p.u)),
        )


def test_density_positive_and_consistent(ellipsoid, gamma_ellipsoid):
    ts = 1 / 20
    for phi, y in ((0.0, 1.0), (0.4, 0.8), (0.7, 1.3)):
        h1 = symplectic_density(ellipsoid, gamma_ellipsoid, ts, CylinderPoint(phi, y),
                                step=1e-4)
        h2 = symplectic_density(ellipsoid, gamma_ellipsoid, ts, CylinderPoint(phi, y),
                                step=1e-5)
        assert h1 > 0
        assert abs(h1 - h2) / h1 < 1e-2
    # leading-order size: tau*^3 K_inv / (4 y^3)
    h = symplectic_density(ellipsoid, gamma_ellipsoid, ts, CylinderPoint(0.2, 1.0))
    assert h == pytest.approx(0.25 * ts**3 * gamma_ellipsoid.K_inv, rel=0.05)


def test_fiber_backward_phase_tracks_input(ellipsoid, gamma_ellipsoid, separatrix):
    ts, m = snap_tau_star(1 / 16)
    for phi in (0.1, 0.45, 0.9):
        start = fiber_state(ellipsoid, gamma_ellipsoid, separatrix,
                            CylinderPoint(phi, 1.0), ts)
        back = asymptotic_phase(ellipsoid, gamma_ellipsoid, start, "backward", ts,
                                max_steps=40000)
        miss = abs(((back.a - phi + 0.5) % 1.0) - 0.5)
        assert miss < 0.05


def test_zflow_delta_is_phase_independent(ellipsoid, gamma_ellipsoid, separatrix):
    ts = 1 / 16
    deltas = [
        scattering_map(ellipsoid, gamma_ellipsoid, separatrix, CylinderPoint(phi, 1.0),
                       ts, method="zflow").delta
        for phi in (0.0, 0.3, 0.8)
    ]
    assert np.ptp(deltas) < 1e-12


def test_scattering_map_smoke(ellipsoid, gamma_ellipsoid, separatrix):
    ts = 1 / 16
    res = scattering_map(ellipsoid, gamma_ellipsoid, separatrix,
                         CylinderPoint(0.3, 1.0), ts, max_steps=40000)
    assert 0.0 <= res.delta < 1.0
    assert abs(res.point_out.y - 1.0) < 5e-3
    z_delta = scattering_map(ellipsoid, gamma_ellipsoid, separatrix,
                             CylinderPoint(0.3, 1.0), ts, method="zflow").delta
    assert abs(((res.delta - z_delta + 0.5) % 1.0) - 0.5) < 0.25


def test_support_violation(ellipsoid, gamma_ellipsoid):
    bump_on_gamma = BumpSpec(center=gamma_ellipsoid.x0, width=0.1, amplitude=1.0,
                             tilt=[0.0, 0.0, 0.0])
    with pytest.raises(SupportViolation):
        check_bump_support(ellipsoid, gamma_ellipsoid, bump_on_gamma)


def test_melnikov_G_derivative(ellipsoid, separatrix, channel_bump):
    # analytic path derivative of G against finite differences along q
    q0 = 0.002
    h = 1e-5
    g0, gp = melnikov_G(ellipsoid, separatrix, channel_bump, q0)
    gp_fd = (melnikov_G(ellipsoid, separatrix, channel_bump, q0 + h)[0]
             - melnikov_G(ellipsoid, separatrix, channel_bump, q0 - h)[0]) / (2 * h)
    assert gp == pytest.approx(gp_fd, rel=2e-3)
