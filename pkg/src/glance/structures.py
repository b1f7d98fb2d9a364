"""Certified invariant structures of the geodesic flow.

Finds closed geodesics by Poincare-section Newton shooting with analytic
variationals, classifies their Floquet multipliers after deflating the four
trivial unit eigenvalues, locates transverse homoclinic orbits by shooting
along the unstable direction, and installs cylinder coordinates (phi, y).

Cylinder conventions (fixed here, documented in the README):
  * theta in [0, 1) is the normalized phase along the closed geodesic,
    theta(s) = (integral of kappa^(2/3) up to arclength s) / K_inv with
    K_inv = contour integral of kappa(gamma, gamma')^(2/3) ds.
  * the height is the adiabatic invariant y = (z kappa^(2/3))^{-1}; on the
    window y in [1/2, 3/2] the rescaled speed z is O(1), so flight times
    are ~tau_star.  A Z-orbit at height y has period l(y) = K_inv * y and
    theta advances at rate 1/(K_inv y).
  * phi = frac(theta / tau_star); one time-tau_star shift advances phi by
    1/(K_inv y) (mod 1): the quotient map is a twist map monotone in 1/y.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .billiards import PhasePoint
from .errors import (
    DegenerateSpectrum,
    DoubledSeparatrix,
    NoConvergence,
    NonTransverseSection,
    NoSignChange,
    OutsideTube,
)
from .geodesics import FlowState, flow, flow_with_variationals
from .rk import integrate
from .surfaces import SurfaceModel, frame_at, project_to_surface


@dataclass
class CylinderPoint:
    phi: float
    y: float

    def __post_init__(self):
        self.phi = float(self.phi) % 1.0
        self.y = float(self.y)


@dataclass
class ClosedGeodesicRecord:
    """A closed geodesic with stability data and dense sampling.

    ts/xs/us sample one period at unit speed (ts is also arclength);
    theta_table is the normalized kappa^(2/3) phase at the nodes.
    """

    x0: np.ndarray
    u0: np.ndarray
    period: float
    monodromy: np.ndarray
    multiplier: float
    margin: float
    e_unstable: np.ndarray
    e_stable: np.ndarray
    K_inv: float
    ts: np.ndarray
    xs: np.ndarray
    us: np.ndarray
    theta_table: np.ndarray
    closure_defect: float
    meta: dict = field(default_factory=dict)

    # -- dense interpolation ------------------------------------------------
    def _bracket(self, t):
        t = t % self.period
        i = int(np.searchsorted(self.ts, t, side="right")) - 1
        i = min(max(i, 0), len(self.ts) - 2)
        return i, t

    def gamma_at(self, t):
        """Cubic-Hermite point and velocity on the geodesic at time t."""
        i, t = self._bracket(t)
        t0, t1 = self.ts[i], self.ts[i + 1]
        h = t1 - t0
        s = (t - t0) / h
        x0, x1 = self.xs[i], self.xs[i + 1]
        u0, u1 = self.us[i], self.us[i + 1]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        x = h00 * x0 + h10 * h * u0 + h01 * x1 + h11 * h * u1
        d00 = 6 * s * (s - 1)
        d10 = (1 - s) * (1 - 3 * s)
        d01 = -d00
        d11 = s * (3 * s - 2)
        u = (d00 * x0 / h + d10 * u0 + d01 * x1 / h + d11 * u1)
        return x, u

    def theta_at(self, t):
        """Normalized phase at time t (piecewise-linear in the dense table)."""
        i, t = self._bracket(t)
        t0, t1 = self.ts[i], self.ts[i + 1]
        th0, th1 = self.theta_table[i], self.theta_table[i + 1]
        return th0 + (th1 - th0) * (t - t0) / (t1 - t0)

    def time_at_theta(self, theta):
        theta = theta % 1.0
        i = int(np.searchsorted(self.theta_table, theta, side="right")) - 1
        i = min(max(i, 0), len(self.ts) - 2)
        th0, th1 = self.theta_table[i], self.theta_table[i + 1]
        t0, t1 = self.ts[i], self.ts[i + 1]
        return t0 + (t1 - t0) * (theta - th0) / (th1 - th0)

    def nearest_time(self, x):
        """Time parameter of the orbit point nearest to x, plus distance."""
        d2 = np.sum((self.xs - x) ** 2, axis=1)
        i = int(np.argmin(d2))
        t = self.ts[i]
        # Newton on <x - gamma(t), gamma'(t)> = 0
        for _ in range(8):
            gx, gu = self.gamma_at(t)
            delta = x - gx
            g = float(delta @ gu)
            # gamma'' from the interpolant is noisy; |gamma'|^2 = 1 dominates
            dg = -1.0 + 0.0
            step = g / (-dg)
            t = t + g
            if abs(g) < 1e-13:
                break
        gx, _ = self.gamma_at(t)
        return t % self.period, float(np.linalg.norm(x - gx))

    @property
    def is_hyperbolic(self):
        return self.margin > 0

    def to_json_dict(self):
        return {
            "x0": self.x0.tolist(),
            "u0": self.u0.tolist(),
            "period": self.period,
            "multiplier": self.multiplier,
            "margin": self.margin,
            "e_unstable": self.e_unstable.tolist(),
            "e_stable": self.e_stable.tolist(),
            "K_inv": self.K_inv,
            "closure_defect": self.closure_defect,
            "monodromy": self.monodromy.tolist(),
            "n_samples": len(self.ts),
            "meta": self.meta,
        }


def _unit_tangent_state(model, x, u):
    x = project_to_surface(model, np.asarray(x, dtype=float))
    fr = frame_at(model, x)
    u = fr.tangent_project(np.asarray(u, dtype=float))
    return x, u / np.linalg.norm(u)


def _transverse_basis(model, x, u):
    """Orthonormal basis of the 2(d-2)-dim transverse symplectic plane.

    V = tangent-to-(T Gamma) intersect {energy fixed}; the flow direction is
    removed.  Returns (P basis columns, flow vector, constraint rows) where
    constraint rows span the directions removed when cleaning a vector.
    """
    d = model.dim
    fr = frame_at(model, x)
    g = model.grad(x)
    hu = model.hess_vec(x, u)
    kap = fr.kappa(u)
    flow_vec = np.concatenate([u, kap * fr.n])
    # rows whose kernel is V: d(Q), d(<grad Q, u>), d(energy)
    rows = np.stack(
        [
            np.concatenate([g, np.zeros(d)]),
            np.concatenate([hu, g]),
            np.concatenate([np.zeros(d), u]),
        ]
    )
    basis = _null_space(rows)
    # remove the flow direction from V
    f = flow_vec / np.linalg.norm(flow_vec)
    coeffs = basis.T @ f
    q = f - basis @ coeffs
    # flow_vec lies in V, so deflate it out of the basis
    proj = basis @ (np.eye(basis.shape[1]) - np.outer(coeffs, coeffs) / (coeffs @ coeffs))
    pb = _orthonormal_columns(proj)
    return pb, flow_vec, rows


def _null_space(rows, rcond=1e-12):
    _, s, vt = np.linalg.svd(rows)
    rank = int(np.sum(s > rcond * s[0]))
    return vt[rank:].T.copy()


def _orthonormal_columns(mat, tol=1e-9):
    q, r = np.linalg.qr(mat)
    keep = np.abs(np.diag(r)) > tol
    return q[:, keep]


def _clean_to_v(vec, rows, flow_vec=None):
    """Remove constraint-row components (and optionally the flow direction)."""
    a = rows
    coef, *_ = np.linalg.lstsq(a.T, vec, rcond=None)
    out = vec - a.T @ coef
    if flow_vec is not None:
        f = flow_vec / np.linalg.norm(flow_vec)
        out = out - (out @ f) * f
    return out


def transverse_map(model, record_or_state, monodromy, x=None, u=None):
    """Quotient of the monodromy onto the transverse plane at (x, u).

    Returns (T, basis): T is 2(d-2) x 2(d-2); its eigenvalues are the
    nontrivial Floquet multipliers.
    """
    if x is None:
        x, u = record_or_state.x0, record_or_state.u0
    basis, flow_vec, rows = _transverse_basis(model, x, u)
    k = basis.shape[1]
    t_mat = np.zeros((k, k))
    f = flow_vec / np.linalg.norm(flow_vec)
    for j in range(k):
        img = monodromy @ basis[:, j]
        img = _clean_to_v(img, rows, flow_vec=flow_vec)
        t_mat[:, j] = basis.T @ img
    return t_mat, basis


UNIT_CIRCLE_TOL = 1e-6


def classify_floquet(model: SurfaceModel, record: ClosedGeodesicRecord, margin_tol=1e-3):
    """Nontrivial multipliers after deflating the trivial directions.

    Raises DegenerateSpectrum when every transverse pair sits on the unit
    circle (elliptic or parabolic).  Returns dict with multipliers and the
    unstable/stable directions for the dominant real pair.
    """
    t_mat, basis = transverse_map(model, record, record.monodromy)
    eigvals, eigvecs = np.linalg.eig(t_mat)
    order = np.argsort(-np.abs(eigvals))
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    mods = np.abs(eigvals)
    if np.all(np.abs(mods - 1.0) < UNIT_CIRCLE_TOL):
        raise DegenerateSpectrum(f"transverse multipliers {eigvals} all on the unit circle")
    lam = eigvals[0]
    if abs(lam.imag) > 1e-8 * abs(lam):
        raise DegenerateSpectrum(f"dominant multiplier {lam} is not real")
    lam = float(lam.real)
    pairing = abs(lam * eigvals[-1] - np.sign(lam) * 1.0)
    e_u = np.real(basis @ eigvecs[:, 0])
    e_s = np.real(basis @ eigvecs[:, -1])
    e_u /= np.linalg.norm(e_u)
    e_s /= np.linalg.norm(e_s)
    return {
        "multipliers": eigvals,
        "lambda": lam,
        "margin": abs(lam) - 1.0,
        "hyperbolic": abs(lam) > 1.0 + margin_tol,
        "pairing_defect": float(abs(pairing)),
        "e_unstable": e_u,
        "e_stable": e_s,
    }


def _section_crossing(model, y_start, t_start, section_x0, section_n, t_max, tol,
                      direction=1.0, min_dt=1e-6):
    """First crossing of <x - x0, n> = 0 with <u, n> * direction > 0.

    Integrates from (t_start, y_start); returns (t_cross, y_cross) or None.
    """
    d = model.dim
    crossings = []

    def g_of(y):
        return float((y[:d] - section_x0) @ section_n)

    state = {"t": t_start, "y": np.array(y_start), "found": None}

    def cb(t_old, y_old, t_new, y_new):
        g0, g1 = g_of(y_old), g_of(y_new)
        if g0 < 0.0 <= g1 and (t_new - t_start) > min_dt:
            udot = float(y_new[d:] @ section_n)
            if udot * direction > 0:
                state["found"] = (t_old, y_old.copy(), t_new, y_new.copy())
                return False
        return True

    def fieldfn(_, y):
        from .geodesics import _field_raw

        dx, du = _field_raw(model, y[:d], y[d:])
        return np.concatenate([dx, du])

    def post(y):
        from .geodesics import _project_state

        x, u = _project_state(model, y[:d], y[d:])
        return np.concatenate([x, u])

    t_end, y_end = integrate(fieldfn, y_start, (t_start, t_start + t_max), tol,
                             postprocess=post, step_callback=cb)
    if state["found"] is None:
        return None
    t0, y0, t1, y1 = state["found"]
    # secant refinement on the crossing time by short re-integrations
    ga, gb = g_of(y0), g_of(y1)
    ta, tb = t0, t1
    y_at = {ta: y0, tb: y1}
    for _ in range(60):
        tc = tb - gb * (tb - ta) / (gb - ga)
        if not (min(ta, tb) < tc < max(ta, tb)):
            tc = 0.5 * (ta + tb)
        _, yc = integrate(fieldfn, y0, (t0, tc), tol, postprocess=post)
        gc = g_of(yc)
        if abs(gc) < 1e-13 * max(1.0, abs(float(yc[:d] @ section_n))):
            return tc, yc
        if (gc < 0) == (ga < 0):
            ta, ga = tc, gc
        else:
            tb, gb = tc, gc
        if abs(tb - ta) < 1e-14 * max(1.0, abs(tb)):
            _, yc = integrate(fieldfn, y0, (t0, 0.5 * (ta + tb)), tol, postprocess=post)
            return 0.5 * (ta + tb), yc
    return tb, y_at.get(tb, yc)


def find_closed_geodesic(model: SurfaceModel, seed: PhasePoint, tol=1e-10,
                         max_iter=12, n_samples=1024):
    """Newton on the Poincare return map, then build the dense record.

    The section is the hyperplane through the seed orthogonal to its
    velocity; corrections live in the transverse symplectic plane, so the
    trivial directions never pollute the Newton system.
    """
    x0, u0 = _unit_tangent_state(model, seed.x, seed.u)
    history = []
    for it in range(max_iter):
        basis, flow_vec, rows = _transverse_basis(model, x0, u0)
        section_n = u0 / np.linalg.norm(u0)
        y0 = np.concatenate([x0, u0])
        est_period = 2.5 * np.pi * model.diameter
        hit = _section_crossing(model, y0, 0.0, x0, section_n, est_period, tol)
        if hit is None:
            raise NoConvergence("no return to the Poincare section")
        t_ret, y_ret = hit
        if abs(float(y_ret[model.dim:] @ section_n)) < 1e-8:
            raise NonTransverseSection("flow tangent to the section at return")
        defect6 = y_ret - y0
        fvec = basis.T @ defect6
        history.append(float(np.linalg.norm(fvec)))
        # closure is judged on the transverse plane: the longitudinal and
        # constraint components of the raw 6-dim defect are parametrization
        # slop at integrator accuracy, not geometry
        if np.linalg.norm(fvec) < max(10.0 * tol, 1e-12):
            return _build_record(model, x0, u0, t_ret, tol, n_samples,
                                 meta={"newton_iters": it, "defect_history": history})
        # Newton step using the variational return-map derivative
        _, mon = flow_with_variationals(model, FlowState(x0, u0), t_ret, tol=tol)
        d = model.dim
        xdot = y_ret[d:]
        fr_ret = frame_at(model, y_ret[:d])
        ret_flow = np.concatenate([y_ret[d:], fr_ret.kappa(y_ret[d:]) * fr_ret.n])
        denom = float(ret_flow[:d] @ section_n)
        proj = np.eye(2 * d) - np.outer(ret_flow, np.concatenate([section_n, np.zeros(d)])) / denom
        dret = proj @ mon
        jac = basis.T @ (dret - np.eye(2 * d)) @ basis
        try:
            step = np.linalg.solve(jac, -fvec)
        except np.linalg.LinAlgError:
            raise NoConvergence("singular Newton system (non-isolated orbit?)")
        corr = basis @ step
        x0, u0 = _unit_tangent_state(model, x0 + corr[:d], u0 + corr[d:])
    raise NoConvergence(f"closed-geodesic Newton stalled; defects {history}")


def _build_record(model, x0, u0, period, tol, n_samples, meta):
    d = model.dim
    ts = np.linspace(0.0, period, n_samples + 1)
    xs = np.zeros((n_samples + 1, d))
    us = np.zeros((n_samples + 1, d))
    acc = np.zeros(n_samples + 1)
    xs[0], us[0] = x0, u0

    def fieldfn(_, y):
        from .geodesics import _field_raw

        x, u = y[:d], y[d : 2 * d]
        dx, du = _field_raw(model, x, u)
        g = model.grad(x)
        gn = np.linalg.norm(g)
        kap = float(model.hess_vec(x, u) @ u) / gn
        return np.concatenate([dx, du, [kap ** (2.0 / 3.0) * np.linalg.norm(u)]])

    def post(y):
        from .geodesics import _project_state

        x, u = _project_state(model, y[:d], y[d : 2 * d])
        return np.concatenate([x, u, y[2 * d :]])

    y = np.concatenate([x0, u0, [0.0]])
    for i in range(n_samples):
        _, y = integrate(fieldfn, y, (ts[i], ts[i + 1]), tol, postprocess=post)
        xs[i + 1], us[i + 1] = y[:d], y[d : 2 * d]
        acc[i + 1] = y[2 * d]
    closure = float(np.linalg.norm(np.concatenate([xs[-1] - x0, us[-1] - u0])))
    k_inv = float(acc[-1])
    theta = acc / k_inv
    theta[-1] = 1.0
    _, mon = flow_with_variationals(model, FlowState(x0, u0), period, tol=tol)
    rec = ClosedGeodesicRecord(
        x0=x0, u0=u0, period=float(period), monodromy=mon,
        multiplier=float("nan"), margin=float("nan"),
        e_unstable=np.zeros(2 * d), e_stable=np.zeros(2 * d),
        K_inv=k_inv, ts=ts, xs=xs, us=us, theta_table=theta,
        closure_defect=closure, meta=dict(meta, tol=tol),
    )
    try:
        fl = classify_floquet(model, rec)
        rec.multiplier = fl["lambda"]
        rec.margin = fl["margin"]
        rec.e_unstable = fl["e_unstable"]
        rec.e_stable = fl["e_stable"]
    except DegenerateSpectrum:
        rec.multiplier = 1.0
        rec.margin = 0.0
    return rec


# ---------------------------------------------------------------------------
# homoclinic search
# ---------------------------------------------------------------------------


@dataclass
class HomoclinicRecord:
    """A homoclinic orbit to a closed geodesic, with asymptotic phase data.

    qs/xs/us sample the orbit by arclength q (q = 0 at the anchor, the
    point of maximal distance from gamma); theta_travel is the accumulated
    normalized phase integral along the path; offsets a_plus/a_minus are the
    theta-unit asymptotic phase defects of the interpolating flow.
    """

    s0: float
    delta: float
    qs: np.ndarray
    xs: np.ndarray
    us: np.ndarray
    theta_travel: np.ndarray
    a_plus: float
    a_minus: float
    transversality_angle: float
    endpoint_distance: float
    splitting_value: float
    meta: dict = field(default_factory=dict)

    def state_at(self, q):
        i = int(np.searchsorted(self.qs, q, side="right")) - 1
        i = min(max(i, 0), len(self.qs) - 2)
        h = self.qs[i + 1] - self.qs[i]
        s = (q - self.qs[i]) / h
        x0, x1 = self.xs[i], self.xs[i + 1]
        u0, u1 = self.us[i], self.us[i + 1]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        x = h00 * x0 + h10 * h * u0 + h01 * x1 + h11 * h * u1
        u = (6 * s * (s - 1) * (x0 - x1) / h + (1 - s) * (1 - 3 * s) * u0
             + s * (3 * s - 2) * u1)
        return x, u / np.linalg.norm(u)

    def theta_travel_at(self, q):
        i = int(np.searchsorted(self.qs, q, side="right")) - 1
        i = min(max(i, 0), len(self.qs) - 2)
        h = self.qs[i + 1] - self.qs[i]
        s = (q - self.qs[i]) / h
        return (1 - s) * self.theta_travel[i] + s * self.theta_travel[i + 1]

    def q_at_theta_travel(self, th):
        return float(np.interp(th, self.theta_travel, self.qs))

    def to_json_dict(self):
        return {
            "s0": self.s0,
            "delta": self.delta,
            "a_plus": self.a_plus,
            "a_minus": self.a_minus,
            "transversality_angle": self.transversality_angle,
            "endpoint_distance": self.endpoint_distance,
            "splitting_value": self.splitting_value,
            "q_range": [float(self.qs[0]), float(self.qs[-1])],
            "n_samples": len(self.qs),
            "meta": self.meta,
        }


def _transported_unstable(model, rec: ClosedGeodesicRecord, s0, tol=1e-10):
    """Unstable direction at phase time s0, via variational transport."""
    st, mon = flow_with_variationals(model, FlowState(rec.x0, rec.u0), s0, tol=tol)
    e = mon @ rec.e_unstable
    _, flow_vec, rows = _transverse_basis(model, st.x, st.u)
    e = _clean_to_v(e, rows)
    return st, e / np.linalg.norm(e)


def _excursion_crossings(model, rec, y_start, t_max, tol, tube_radius):
    """Section crossings of an orbit, with transverse coordinates.

    Yields (t, xi_u, xi_s, dist) at each positive crossing of the section at
    the record's base point.
    """
    d = model.dim
    basis, flow_vec, rows = _transverse_basis(model, rec.x0, rec.u0)
    t_mat, _ = transverse_map(model, rec, rec.monodromy)
    eigvals, eigvecs = np.linalg.eig(t_mat)
    order = np.argsort(-np.abs(eigvals))
    vecs = np.real(eigvecs[:, order])
    # dual basis so coordinates read off cleanly even if e_u, e_s not orthogonal
    dual = np.linalg.inv(vecs)
    section_n = rec.u0
    out = []
    t_cur = 0.0
    y_cur = np.array(y_start)
    guard = 0
    while t_cur < t_max and guard < 200:
        guard += 1
        hit = _section_crossing(model, y_cur, t_cur, rec.x0, section_n,
                                t_max - t_cur, tol, min_dt=0.05 * rec.period)
        if hit is None:
            break
        t_cur, y_cur = hit
        delta = y_cur - np.concatenate([rec.x0, rec.u0])
        delta = _clean_to_v(delta, rows, flow_vec=flow_vec)
        coords = dual @ (basis.T @ delta)
        dist = float(np.linalg.norm(delta))
        out.append((t_cur, float(coords[0]), float(coords[-1]), dist))
    return out


def splitting_functional(model, rec: ClosedGeodesicRecord, s0, delta=1e-5,
                         tol=1e-9, t_max=None, tube_radius=None):
    """Signed unstable coordinate of the returning orbit at its closest
    section crossing; zero exactly at a homoclinic connection."""
    if t_max is None:
        t_max = 24.0 * rec.period
    if tube_radius is None:
        tube_radius = 0.05 * rec.period
    st, e_u = _transported_unstable(model, rec, s0, tol=tol)
    d = model.dim
    x = st.x + delta * e_u[:d]
    u = st.u + delta * e_u[d:]
    x, u = _unit_tangent_state(model, x, u)
    y0 = np.concatenate([x, u])
    crossings = _excursion_crossings(model, rec, y0, t_max, tol, tube_radius)
    if len(crossings) < 3:
        return None
    # first excursion: first crossing beyond the far threshold, return branch
    # runs until the orbit leaves again
    dists = np.array([c[3] for c in crossings])
    thr = 0.25 * float(dists.max())
    far = np.nonzero(dists > thr)[0]
    if far.size == 0:
        return None
    i0 = int(far[0])
    i1 = len(crossings)
    below = False
    for j in range(i0 + 1, len(crossings)):
        if dists[j] <= thr:
            below = True
        elif below:
            i1 = j
            break
    branch = [c for c in crossings[i0 + 1 : i1] if c[3] <= thr]
    if not branch:
        return None
    # the unstable coordinate of the closest approach to W^s_loc, read from
    # the unstable-dominated tail and referenced back by the multiplier
    # (late readings are immune to quadratic chart mixing from xi_s)
    k_min = int(np.argmin([abs(c[1]) for c in branch]))
    lam = abs(rec.multiplier)
    ests = []
    for k in range(k_min, len(branch)):
        xi_u, xi_s = branch[k][1], branch[k][2]
        if abs(xi_u) > 3.0 * abs(xi_s) and abs(xi_u) < 0.1:
            ests.append(xi_u / lam ** (k - k_min))
    value = ests[-1] if ests else branch[k_min][1]
    ref = branch[k_min]
    return {"xi_u": float(value), "xi_s": ref[2], "t": ref[0], "dist": ref[3],
            "raw_xi_u": ref[1], "n_tail": len(ests)}


def find_homoclinic(model: SurfaceModel, rec: ClosedGeodesicRecord,
                    window=(0.0, None), n_scan=24, delta=1e-5, tol=1e-9,
                    doubled_tol=1e-9, angle_tol=1e-3, t_max=None):
    """Shooting search for a transverse homoclinic orbit.

    Scans the departure phase s0 over the window, brackets a sign change of
    the splitting functional, refines by secant, and certifies transversality
    from the returning curve's angle against the stable direction.
    """
    lo, hi = window[0], window[1] if window[1] is not None else rec.period
    s_grid = np.linspace(lo, hi, n_scan, endpoint=False)
    values = []
    for s0 in s_grid:
        out = splitting_functional(model, rec, s0, delta=delta, tol=tol, t_max=t_max)
        values.append(out["xi_u"] if out is not None else np.nan)
    values = np.asarray(values)
    finite = np.isfinite(values)
    if not finite.any():
        raise NoSignChange("no returning orbits found in the window")
    max_split = float(np.nanmax(np.abs(values)))
    if max_split < doubled_tol:
        raise DoubledSeparatrix(
            f"splitting stays below {doubled_tol:g} (max {max_split:.3e}) - integrable case"
        )
    # bracket a sign change on the finite part
    idx = None
    fin = np.nonzero(finite)[0]
    for a, b in zip(fin[:-1], fin[1:]):
        if values[a] * values[b] < 0:
            idx = (a, b)
            break
    if idx is None:
        raise NoSignChange(f"splitting does not change sign (max {max_split:.3e})")
    sa, sb = s_grid[idx[0]], s_grid[idx[1]]
    fa, fb = values[idx[0]], values[idx[1]]
    for _ in range(50):
        sc = sb - fb * (sb - sa) / (fb - fa)
        if not (min(sa, sb) < sc < max(sa, sb)):
            sc = 0.5 * (sa + sb)
        out = splitting_functional(model, rec, sc, delta=delta, tol=tol, t_max=t_max)
        fc = out["xi_u"] if out is not None else np.nan
        if not np.isfinite(fc):
            raise NoSignChange("lost the returning orbit while refining")
        if abs(fc) < 0.02 * doubled_tol + 1e-12 or abs(sb - sa) < 1e-12:
            break
        if (fc < 0) == (fa < 0):
            sa, fa = sc, fc
        else:
            sb, fb = sc, fc
    s_star = sc
    final = out

    # transversality angle from the returning curve's tangent in (xi_u, xi_s)
    h = max(1e-6, 1e-4 * rec.period)
    outs = []
    for s_probe in (s_star - h, s_star + h):
        o = splitting_functional(model, rec, s_probe, delta=delta, tol=tol, t_max=t_max)
        if o is None:
            raise NoSignChange("transversality probe lost the orbit")
        outs.append(o)
    d_u = (outs[1]["xi_u"] - outs[0]["xi_u"]) / (2 * h)
    d_s = (outs[1]["xi_s"] - outs[0]["xi_s"]) / (2 * h)
    angle = float(np.arctan2(abs(d_u), abs(d_s)))

    record = _trace_homoclinic(model, rec, s_star, delta, tol)
    record.transversality_angle = angle
    record.splitting_value = float(fc)
    record.endpoint_distance = float(final["dist"] * abs(fc) / max(abs(fc), 1e-300))
    record.endpoint_distance = float(abs(fc))
    record.meta.update({"delta": delta, "tol": tol, "scan_points": n_scan,
                        "max_splitting": max_split})
    return record


def _trace_homoclinic(model, rec, s0, delta, tol, t_forward=None, t_backward=None):
    """Integrate the homoclinic orbit both ways and build the dense record.

    Forward needs to clear the unstable escape from the starting offset plus
    the excursion and the stable re-entry; backward only has to sink into
    the tube.
    """
    if t_forward is None:
        t_forward = (6.0 + np.log(0.3 * rec.period / delta) / max(np.log(abs(rec.multiplier)), 0.2)) * rec.period
    if t_backward is None:
        t_backward = 8.0 * rec.period
    st, e_u = _transported_unstable(model, rec, s0, tol=tol)
    d = model.dim
    x = st.x + delta * e_u[:d]
    u = st.u + delta * e_u[d:]
    x, u = _unit_tangent_state(model, x, u)

    def trace(sign):
        t_span = t_forward if sign > 0 else t_backward
        n_nodes = max(400, int(24 * t_span))
        ts = np.linspace(0.0, sign * t_span, n_nodes + 1)
        xs = np.zeros((n_nodes + 1, d))
        us = np.zeros((n_nodes + 1, d))
        acc = np.zeros(n_nodes + 1)
        xs[0], us[0] = x, u

        def fieldfn(_, y):
            from .geodesics import _field_raw

            xx, uu = y[:d], y[d : 2 * d]
            dx, du = _field_raw(model, xx, uu)
            g = model.grad(xx)
            gn = np.linalg.norm(g)
            kap = float(model.hess_vec(xx, uu) @ uu) / gn
            return np.concatenate([dx, du, [np.linalg.norm(uu) * kap ** (2.0 / 3.0)]])

        def post(y):
            from .geodesics import _project_state

            xx, uu = _project_state(model, y[:d], y[d : 2 * d])
            return np.concatenate([xx, uu, y[2 * d :]])

        y = np.concatenate([x, u, [0.0]])
        for i in range(n_nodes):
            _, y = integrate(fieldfn, y, (ts[i], ts[i + 1]), tol, postprocess=post)
            xs[i + 1], us[i + 1] = y[:d], y[d : 2 * d]
            acc[i + 1] = y[2 * d]
        return ts, xs, us, acc

    tsf, xsf, usf, accf = trace(+1.0)
    tsb, xsb, usb, accb = trace(-1.0)

    # assemble by arclength (unit speed: q = t), backward part reversed
    qs = np.concatenate([tsb[::-1], tsf[1:]])
    xs = np.concatenate([xsb[::-1], xsf[1:]])
    us = np.concatenate([usb[::-1], usf[1:]])
    theta_travel = np.concatenate([accb[::-1], accf[1:]]) / rec.K_inv

    # anchor q = 0 at the farthest point from gamma
    dists = np.array([rec.nearest_time(xq)[1] for xq in xs[:: max(1, len(xs) // 200)]])
    far_idx = int(np.argmax(dists)) * max(1, len(xs) // 200)
    q_shift = qs[far_idx]
    qs = qs - q_shift
    th_shift = np.interp(0.0, qs, theta_travel)
    theta_travel = theta_travel - th_shift

    a_plus = _phase_offset(rec, qs, xs, theta_travel, forward=True)
    a_minus = _phase_offset(rec, qs, xs, theta_travel, forward=False)
    return HomoclinicRecord(
        s0=float(s0), delta=float(delta), qs=qs, xs=xs, us=us,
        theta_travel=theta_travel, a_plus=a_plus, a_minus=a_minus,
        transversality_angle=float("nan"), endpoint_distance=float("nan"),
        splitting_value=float("nan"),
    )


def _phase_offset(rec, qs, xs, theta_travel, forward=True, n_tail=6):
    """Asymptotic defect theta(gamma-projection) - theta_travel, extrapolated.

    The defect converges exponentially as the orbit locks onto gamma; Aitken
    on per-loop samples squeezes the tail.
    """
    idx = range(len(qs) - 1, -1, -1) if forward else range(len(qs))
    picked = []
    for i in idx:
        t_near, dist = rec.nearest_time(xs[i])
        if dist > 0.02 * rec.period:
            break
        th = rec.theta_at(t_near)
        picked.append((qs[i], th, theta_travel[i], dist))
    if len(picked) < 8:
        return float("nan")
    # run from the excursion edge into the deep tail so Aitken converges
    picked = picked[::-1]
    ds = []
    for q, th, tt, dist in picked:
        raw = (th - tt) % 1.0
        if ds:
            # unwrap against the previous sample for continuity
            while raw - ds[-1] > 0.5:
                raw -= 1.0
            while raw - ds[-1] < -0.5:
                raw += 1.0
        ds.append(raw)
    # sample once per loop: theta_travel advances by ~1 per loop
    tts = [p[2] for p in picked]
    loop_marks = []
    last_mark = None
    for j in range(len(picked)):
        mark = np.floor(tts[j])
        if mark != last_mark:
            loop_marks.append(j)
            last_mark = mark
    vals = [ds[j] for j in loop_marks][-n_tail:]
    if len(vals) >= 3:
        extr = _aitken(vals)
    else:
        extr = vals[-1]
    return float(extr % 1.0)


def _unwrap_defect(x):
    x = x % 1.0
    return x if x < 0.5 else x - 1.0


def _aitken(seq):
    s = list(seq)
    while len(s) >= 3:
        nxt = []
        for a, b, c in zip(s[:-2], s[1:-1], s[2:]):
            denom = c - 2 * b + a
            nxt.append(c - (c - b) ** 2 / denom if abs(denom) > 1e-300 else c)
        s = nxt
    return s[-1] if s else float("nan")


# ---------------------------------------------------------------------------
# cylinder coordinates
# ---------------------------------------------------------------------------


def cylinder_coordinates(model: SurfaceModel, rec: ClosedGeodesicRecord, tau_star,
                         p: PhasePoint, tube_radius=None) -> CylinderPoint:
    """(phi, y) of a near-gamma phase point.

    y = (z kappa(x, w)^(2/3))^{-1} is the adiabatic height (conserved by the
    interpolating flow; period l(y) = K_inv y); phi = frac(theta/tau_star).
    """
    if tube_radius is None:
        tube_radius = 0.05 * rec.period
    t_near, dist = rec.nearest_time(p.x)
    if dist > tube_radius:
        raise OutsideTube(f"distance {dist:.3e} exceeds tube radius {tube_radius:.3e}")
    theta = rec.theta_at(t_near)
    speed2 = float(p.u @ p.u)
    sin_th = np.sqrt(max(0.0, 1.0 - speed2))
    w = p.u / np.sqrt(speed2)
    fr = frame_at(model, p.x)
    kap = fr.kappa(w)
    z = 2.0 * sin_th / (tau_star * kap)
    y = 1.0 / (z * kap ** (2.0 / 3.0))
    return CylinderPoint(phi=(theta / tau_star) % 1.0, y=y)


def cylinder_lift(model: SurfaceModel, rec: ClosedGeodesicRecord, tau_star,
                  cp: CylinderPoint) -> PhasePoint:
    """Inverse of cylinder_coordinates onto the fundamental domain of gamma."""
    return lift_at_theta(model, rec, tau_star, tau_star * cp.phi, cp.y)


def lift_at_theta(model: SurfaceModel, rec: ClosedGeodesicRecord, tau_star,
                  theta, y) -> PhasePoint:
    """Cylinder lift by raw phase theta (continuous across the phi seam)."""
    cp = CylinderPoint(0.0, y)
    theta = theta % 1.0
    t = rec.time_at_theta(theta)
    x, w = rec.gamma_at(t)
    x = project_to_surface(model, x)
    fr = frame_at(model, x)
    w = fr.tangent_project(w)
    w /= np.linalg.norm(w)
    kap = fr.kappa(w)
    z = 1.0 / (cp.y * kap ** (2.0 / 3.0))
    sin_th = 0.5 * tau_star * z * kap
    if not (0.0 < sin_th < 1.0):
        raise OutsideTube(f"lift needs sin theta = {sin_th:.3g} outside (0,1)")
    return PhasePoint(x, w * np.sqrt(1.0 - sin_th**2))


def save_record_json(path, record):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record.to_json_dict(), fh, indent=2, sort_keys=True)
