"""Near-boundary rescaled coordinates and executable expansion checks.

For a fixed scale tau_* > 0 the rescaled state is (x, w, z) with w = u/|u|
and z = 2 sqrt(1-u^2) / (tau_* kappa(x, w)).  One billiard bounce is, to
O(tau_*^2), the time-tau_* shift of the interpolating field

    xdot = z w
    wdot = z kappa(x, w) n(x)
    zdot = -z^2 [ (2/3) kappa^{-1} R(x, w) + 2 <C(x) w, n(x)> ]

whose exact integral is z * kappa(x, w)^(2/3); the adiabatic height is its
reciprocal.  The <C w, n> term carries the variation of |grad Q| along the
surface (we never renormalize Q); it vanishes when |grad Q| is constant.

expansion_residuals computes the remainders of the one-bounce expansions;
their log-log slopes against the flight time are the executable form of the
order claims (3, 2, 3, 3, and 2 for the interpolation defect).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .billiards import PhasePoint, billiard_step, chord_velocity
from .errors import FloorDominated, GrazingState, InvalidZ
from .rk import integrate
from .surfaces import SurfaceModel, frame_at, project_to_surface


@dataclass
class RescaledPoint:
    x: np.ndarray
    w: np.ndarray
    z: float
    tau_star: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.w = np.asarray(self.w, dtype=float)


@dataclass
class ExpansionResiduals:
    tau: float
    res_i: float
    res_ii: float
    res_iii: float
    res_iv: float
    res_interp: float


def to_rescaled(model: SurfaceModel, p: PhasePoint, tau_star) -> RescaledPoint:
    speed2 = float(p.u @ p.u)
    if speed2 <= 0.0:
        raise GrazingState("u = 0 has no direction")
    one_minus = 1.0 - speed2
    if one_minus <= 0.0:
        raise GrazingState("state on the phase-space boundary")
    w = p.u / np.sqrt(speed2)
    fr = frame_at(model, p.x)
    z = 2.0 * np.sqrt(one_minus) / (tau_star * fr.kappa(w))
    return RescaledPoint(p.x.copy(), w, float(z), float(tau_star))


def from_rescaled(model: SurfaceModel, rp: RescaledPoint) -> PhasePoint:
    fr = frame_at(model, rp.x)
    kap = fr.kappa(rp.w)
    s2 = 1.0 - 0.25 * rp.tau_star**2 * kap**2 * rp.z**2
    if not (0.0 < s2 < 1.0):
        raise InvalidZ(f"reconstructed |u|^2 = {s2:.6g} outside (0, 1)")
    return PhasePoint(rp.x.copy(), np.sqrt(s2) * rp.w)


def z_field(model: SurfaceModel, rp: RescaledPoint):
    """(xdot, wdot, zdot) of the interpolating field at rp.

    Evaluates from the raw surface derivatives so integrator stages slightly
    off the level set are fine.
    """
    g = model.grad(rp.x)
    gn = float(np.linalg.norm(g))
    n = -g / gn
    cw = model.hess_vec(rp.x, rp.w) / gn
    kap = float(cw @ rp.w)
    rw = float(model.third_vv(rp.x, rp.w) @ rp.w) / gn
    zdot = -rp.z**2 * ((2.0 / 3.0) * rw / kap + 2.0 * float(cw @ n))
    return rp.z * rp.w, rp.z * kap * n, zdot


def z_flow(model: SurfaceModel, rp: RescaledPoint, t, tol=1e-10) -> RescaledPoint:
    """Integrate the interpolating field; x stays on the surface, |w| = 1."""
    d = model.dim

    def field(_, y):
        dx, dw, dz = z_field(model, RescaledPoint(y[:d], y[d : 2 * d], y[2 * d], rp.tau_star))
        return np.concatenate([dx, dw, [dz]])

    def post(y):
        x = project_to_surface(model, y[:d])
        fr = frame_at(model, x)
        w = fr.tangent_project(y[d : 2 * d])
        w = w / np.linalg.norm(w)
        return np.concatenate([x, w, y[2 * d :]])

    y0 = np.concatenate([rp.x, rp.w, [rp.z]])
    _, y = integrate(field, y0, (0.0, t), tol, postprocess=post)
    return RescaledPoint(y[:d], y[d : 2 * d], float(y[2 * d]), rp.tau_star)


def adiabatic_invariant(model: SurfaceModel, rp: RescaledPoint):
    """y = (z * kappa(x, w)^(2/3))^{-1}, the exact integral of the field."""
    fr = frame_at(model, rp.x)
    return 1.0 / (rp.z * fr.kappa(rp.w) ** (2.0 / 3.0))


def expansion_residuals(model: SurfaceModel, p: PhasePoint) -> ExpansionResiduals:
    """One-bounce expansion remainders at p (small sqrt(1-u^2) expected).

    res_i    flight-time expansion through the cubic form
    res_ii   one bounce vs one Euler step of the geodesic field
    res_iii  unit-normal transport through the normal jet
    res_iv   angle drift through (1/6) R + (1/2) kappa <Cv, n>
    res_interp  bounce vs identity + tau_* Z in (x, w, z), at z = 1
    """
    fr = frame_at(model, p.x)
    sin_th = p.sin_theta
    v = chord_velocity(fr, p.u)
    q, diag = billiard_step(model, p)
    tau = diag.tau
    fr_out = frame_at(model, q.x)
    sin_out = q.sin_theta

    kv = fr.kappa(v)
    big_r = fr.third_form(v)
    cv = fr.curvature @ v
    cvn = float(cv @ fr.n)

    res_i = abs(sin_th - 0.5 * tau * kv - tau**2 * big_r / 6.0)

    ku = fr.kappa(p.u)
    res_ii = max(
        float(np.linalg.norm(q.x - p.x - tau * p.u)),
        float(np.linalg.norm(q.u - p.u - tau * ku * fr.n)),
    )

    res_iii = float(
        np.linalg.norm(
            fr_out.n - fr.n + tau * fr.shape_operator(v) + 0.5 * tau**2 * fr.normal_jet(v)
        )
    )

    res_iv = abs(sin_out - sin_th - tau**2 * (big_r / 6.0 + 0.5 * kv * cvn))

    # interpolation defect at the state's own scale: tau_* = 2 sin_th / kappa(x,w)
    w = p.u / np.linalg.norm(p.u)
    kw = fr.kappa(w)
    tau_star = 2.0 * sin_th / kw
    rp = RescaledPoint(p.x, w, 1.0, tau_star)
    dx, dw, dz = z_field(model, rp)
    w_out = q.u / np.linalg.norm(q.u)
    z_out = 2.0 * sin_out / (tau_star * fr_out.kappa(w_out))
    res_interp = max(
        float(np.linalg.norm(q.x - p.x - tau_star * dx)),
        float(np.linalg.norm(w_out - w - tau_star * dw)),
        abs(z_out - 1.0 - tau_star * dz),
    )
    return ExpansionResiduals(tau, res_i, res_ii, res_iii, res_iv, res_interp)


@dataclass
class OrderFit:
    slope: float
    intercept: float
    max_deviation: float
    n_used: int


def fit_order(samples, floor=None) -> OrderFit:
    """Least-squares slope of log|residual| vs log scale.

    samples: sequence of (scale, residual).  floor (optional) is the rounding
    floor of the residual measurement; samples within 10x of it are rejected,
    and if fewer than 5 survive the fit raises FloorDominated.
    """
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be (scale, residual) pairs")
    scales, res = arr[:, 0], arr[:, 1]
    if floor is None:
        floor = 1e-15 * max(1.0, float(np.max(res)) / max(float(np.max(scales)), 1e-300))
    keep = res > 10.0 * floor
    if keep.sum() < 5:
        raise FloorDominated(f"only {int(keep.sum())} samples above 10x floor {floor:.2e}")
    ls, lr = np.log(scales[keep]), np.log(res[keep])
    if ls.max() - ls.min() < np.log(100.0) - 1e-9:
        raise ValueError("samples must span at least two decades of scale")
    slope, intercept = np.polyfit(ls, lr, 1)
    dev = float(np.max(np.abs(lr - (slope * ls + intercept))))
    return OrderFit(float(slope), float(intercept), dev, int(keep.sum()))


def tau_schedule(tau1, n):
    """Geometric cylinder schedule tau_k = (2/3)^(k-1) tau_1."""
    if tau1 <= 0:
        raise ValueError("tau1 must be positive")
    return tau1 * (2.0 / 3.0) ** np.arange(n)


def residual_sweep(model: SurfaceModel, x0, tangent_seed, taus, max_shrink=2):
    """Expansion residuals over a flight-time sweep at one surface point.

    Initial angles target each tau through the first-order chord relation
    sin_theta = tau kappa / 2; the exact computed tau is the abscissa.
    Returns a list of ExpansionResiduals sorted by tau.
    """
    x = project_to_surface(model, np.asarray(x0, dtype=float))
    fr = frame_at(model, x)
    t = fr.tangent_project(np.asarray(tangent_seed, dtype=float))
    t /= np.linalg.norm(t)
    rows = []
    for tau_target in taus:
        kw = fr.kappa(t)
        sin_th = 0.5 * tau_target * kw
        if not (0.0 < sin_th < 1.0):
            continue
        u = t * np.sqrt(1.0 - sin_th**2)
        rows.append(expansion_residuals(model, PhasePoint(x, u)))
    rows.sort(key=lambda r: r.tau)
    return rows


RESIDUAL_ORDERS = {
    "res_i": 3.0,
    "res_ii": 2.0,
    "res_iii": 3.0,
    "res_iv": 3.0,
    "res_interp": 2.0,
}


def fit_sweep(rows, tolerance=0.3, shrink_retries=2):
    """Fit every residual column of a sweep; auto-shrinks the window from the
    large-tau end if a fit misses its nominal order by more than tolerance."""
    report = {}
    for name, nominal in RESIDUAL_ORDERS.items():
        data = [(r.tau, getattr(r, name)) for r in rows]
        fit = None
        for cut in range(shrink_retries + 1):
            use = data[: len(data) - cut] if cut else data
            if len(use) < 5:
                break
            try:
                cand = fit_order(use)
            except FloorDominated:
                cand = None
            if cand is not None and abs(cand.slope - nominal) <= tolerance:
                fit = cand
                break
            if cand is not None and fit is None:
                fit = cand
        if fit is None:
            report[name] = {"quantity": name, "slope": float("nan"), "nominal": nominal, "pass": False}
        else:
            report[name] = {
                "quantity": name,
                "slope": fit.slope,
                "nominal": nominal,
                "pass": bool(abs(fit.slope - nominal) <= tolerance),
            }
    return report
