import numpy as np
import pytest
from scipy.integrate import quad

from glance.billiards import PhasePoint
from glance.errors import DegenerateSpectrum, DoubledSeparatrix, OutsideTube
from glance.structures import (
    CylinderPoint,
    classify_floquet,
    cylinder_coordinates,
    cylinder_lift,
    find_closed_geodesic,
    splitting_functional,
)


def test_sphere_great_circle(gamma_sphere, sphere):
    assert gamma_sphere.period == pytest.approx(2 * np.pi, abs=1e-8)
    assert gamma_sphere.closure_defect < 1e-8
    with pytest.raises(DegenerateSpectrum):
        classify_floquet(sphere, gamma_sphere)


def test_middle_ellipse_period_oracle(gamma_ellipsoid):
    # arclength of the (a, c) principal ellipse by adaptive quadrature
    a, c = 1.0, 0.6
    per, err = quad(lambda t: np.hypot(a * np.sin(t), c * np.cos(t)), 0.0,
                    2 * np.pi, epsabs=1e-12, limit=200)
    assert gamma_ellipsoid.period == pytest.approx(per, abs=1e-8)
    assert gamma_ellipsoid.closure_defect < 1e-9


def test_middle_ellipse_hyperbolic(ellipsoid, gamma_ellipsoid):
    fl = classify_floquet(ellipsoid, gamma_ellipsoid)
    assert fl["hyperbolic"]
    assert abs(fl["lambda"]) > 1.0 + 1e-3
    assert fl["pairing_defect"] < 1e-6


def test_finder_fixed_point(ellipsoid, gamma_ellipsoid):
    again = find_closed_geodesic(
        ellipsoid, PhasePoint(gamma_ellipsoid.x0, gamma_ellipsoid.u0), tol=1e-11)
    assert np.abs(again.x0 - gamma_ellipsoid.x0).max() < 1e-9
    assert again.period == pytest.approx(gamma_ellipsoid.period, abs=1e-9)


def test_K_inv_quadrature(ellipsoid, gamma_ellipsoid):
    # composite-Simpson oracle on the dense samples
    from glance.surfaces import frame_at

    rec = gamma_ellipsoid
    vals = []
    for x, u in zip(rec.xs, rec.us):
        fr = frame_at(ellipsoid, x)
        vals.append(fr.kappa(u / np.linalg.norm(u)) ** (2.0 / 3.0))
    from scipy.integrate import simpson

    oracle = simpson(vals, x=rec.ts)
    assert rec.K_inv == pytest.approx(oracle, rel=1e-7)


def test_splitting_integrable_small(ellipsoid, gamma_ellipsoid):
    out = splitting_functional(ellipsoid, gamma_ellipsoid, 0.85, delta=1e-5, tol=1e-12)
    assert out is not None
    assert abs(out["xi_u"]) < 5e-9


def test_gamma_interpolation(gamma_ellipsoid):
    rec = gamma_ellipsoid
    x, u = rec.gamma_at(0.37 * rec.period)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-6
    t_near, dist = rec.nearest_time(x)
    assert dist < 1e-10
    assert t_near == pytest.approx(0.37 * rec.period, abs=1e-8)


def test_theta_table_inverse(gamma_ellipsoid):
    rec = gamma_ellipsoid
    for theta in (0.0, 0.21, 0.5, 0.93):
        t = rec.time_at_theta(theta)
        assert rec.theta_at(t) == pytest.approx(theta, abs=1e-9)


def test_cylinder_roundtrip(ellipsoid, gamma_ellipsoid):
    ts = 1 / 20
    for phi, y in ((0.0, 1.0), (0.3, 0.7), (0.8, 1.4)):
        p = cylinder_lift(ellipsoid, gamma_ellipsoid, ts, CylinderPoint(phi, y))
        cp = cylinder_coordinates(ellipsoid, gamma_ellipsoid, ts, p)
        assert cp.phi == pytest.approx(phi, abs=1e-8)
        assert cp.y == pytest.approx(y, abs=1e-8)


def test_cylinder_anchor_convention(ellipsoid, gamma_ellipsoid):
    p = cylinder_lift(ellipsoid, gamma_ellipsoid, 1 / 20, CylinderPoint(0.0, 1.0))
    assert np.abs(p.x - gamma_ellipsoid.x0).max() < 1e-9
    cp = cylinder_coordinates(ellipsoid, gamma_ellipsoid, 1 / 20, p)
    assert cp.phi == pytest.approx(0.0, abs=1e-9)
    assert cp.y == pytest.approx(1.0, abs=1e-9)


def test_outside_tube(ellipsoid, gamma_ellipsoid):
    p = cylinder_lift(ellipsoid, gamma_ellipsoid, 1 / 20, CylinderPoint(0.0, 1.0))
    far = PhasePoint(np.array([0.0, 0.8, 0.0]), p.u)
    with pytest.raises(OutsideTube):
        cylinder_coordinates(ellipsoid, gamma_ellipsoid, 1 / 20, far)


def test_homoclinic_negative_control_raises(ellipsoid, gamma_ellipsoid):
    from glance.structures import find_homoclinic

    with pytest.raises(DoubledSeparatrix):
        find_homoclinic(ellipsoid, gamma_ellipsoid, n_scan=4, delta=1e-5, tol=1e-13)


def test_record_serialization(gamma_ellipsoid, separatrix, tmp_path):
    import json

    from glance.structures import save_record_json

    save_record_json(tmp_path / "gamma.json", gamma_ellipsoid)
    data = json.loads((tmp_path / "gamma.json").read_text())
    assert data["period"] == pytest.approx(gamma_ellipsoid.period)
    assert len(data["monodromy"]) == 6
    save_record_json(tmp_path / "hom.json", separatrix)
    data = json.loads((tmp_path / "hom.json").read_text())
    assert 0.0 <= data["a_plus"] < 1.0


def test_separatrix_phase_offsets_stable(ellipsoid, gamma_ellipsoid, separatrix):
    # offsets are properties of the orbit: re-tracing the same shot at
    # a different integration tolerance reproduces them (a different
    # shooting offset would select a different leaf of the integrable
    # separatrix continuum, with genuinely different offsets)
    from glance.structures import _trace_homoclinic

    again = _trace_homoclinic(ellipsoid, gamma_ellipsoid, 1.702, 1e-5, 3e-11)
    assert abs(again.a_plus - separatrix.a_plus) < 2e-4
    assert abs(again.a_minus - separatrix.a_minus) < 2e-4
