"""Exact billiard dynamics on an implicit convex surface.

State is (x, u): x on the surface, u the tangential component of the unit
chord velocity, |u| <= 1.  The inward chord velocity is v = u + sqrt(1-u^2) n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BracketFailure, GrazingState
from .surfaces import SurfaceModel, frame_at, project_batch, project_to_surface, tangent_basis_at

GRAZING_THRESHOLD = 1e-14


@dataclass
class PhasePoint:
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.u = np.asarray(self.u, dtype=float)

    @property
    def sin_theta(self):
        return float(np.sqrt(max(0.0, 1.0 - self.u @ self.u)))

    def copy(self):
        return PhasePoint(self.x.copy(), self.u.copy())


@dataclass
class StepDiagnostics:
    tau: float
    sin_theta: float
    speed_defect: float
    tangency_defect: float
    grazing: bool = False
    symplectic_defect: float | None = None


def chord_velocity(frame, u):
    """v = u + sqrt(1 - u^2) n; unit by construction for tangent u."""
    s2 = 1.0 - float(u @ u)
    return u + np.sqrt(max(0.0, s2)) * frame.n


def flight_time(model: SurfaceModel, p: PhasePoint, frame=None):
    """Time to the next collision: the positive root of Q(x + t v) = 0.

    Solved on the deflated function h(t) = Q(x + t v)/t, which removes the
    t = 0 root; h(0+) = -|grad Q| sqrt(1-u^2) < 0 and h has a single sign
    change before the far side of the body.  Bracket, then safeguarded
    Newton (bisection fallback keeps the iterate inside the bracket).
    """
    one_minus_u2 = 1.0 - float(p.u @ p.u)
    if one_minus_u2 <= 0.0:
        return 0.0
    if one_minus_u2 < GRAZING_THRESHOLD:
        raise GrazingState(f"1 - |u|^2 = {one_minus_u2:.3e}")
    if frame is None:
        frame = frame_at(model, p.x)
    v = chord_velocity(frame, p.u)
    x = p.x

    def h(t):
        return float(model.q(x + t * v)) / t

    def h_prime(t):
        xt = x + t * v
        return (float(model.grad(xt) @ v) * t - float(model.q(xt))) / (t * t)

    # first-order chord-length estimate seeds the bracket hunt
    kv = frame.kappa(v)
    sin_th = np.sqrt(one_minus_u2)
    t_guess = 2.0 * sin_th / kv if kv > 0 else 0.5 * model.diameter
    t_max = 4.0 * model.diameter

    lo = min(t_guess, 0.25 * model.diameter)
    while h(lo) >= 0.0:
        lo *= 0.5
        if lo < 1e-300:
            raise BracketFailure("deflated flight function not negative near 0")
    hi = max(t_guess, lo * 2.0)
    while h(hi) <= 0.0:
        hi *= 1.6
        if hi > t_max:
            raise BracketFailure(f"no sign change in (0, {t_max:g}]")

    t = min(max(t_guess, lo), hi)
    tol_q = model.on_surface_tol
    for _ in range(100):
        ht = h(t)
        if ht < 0.0:
            lo = t
        else:
            hi = t
        if abs(ht * t) <= 0.01 * tol_q and (hi - lo) <= 1e-14 * max(1.0, t):
            break
        dh = h_prime(t)
        t_new = t - ht / dh if dh != 0.0 else 0.5 * (lo + hi)
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        t = t_new
    return t


def billiard_step(model: SurfaceModel, p: PhasePoint):
    """One reflection: follow the chord, reflect the velocity, re-project.

    Grazing states are returned unchanged (boundary fixed point) with the
    grazing flag set.
    """
    frame = frame_at(model, p.x)
    sin_th = p.sin_theta
    try:
        tau = flight_time(model, p, frame=frame)
    except GrazingState:
        return p.copy(), StepDiagnostics(0.0, sin_th, 0.0, 0.0, grazing=True)
    if tau == 0.0:
        return p.copy(), StepDiagnostics(0.0, sin_th, 0.0, 0.0, grazing=True)
    v = chord_velocity(frame, p.u)
    x_new = project_to_surface(model, p.x + tau * v)
    frame_new = frame_at(model, x_new)
    u_new = v - (v @ frame_new.n) * frame_new.n
    u_new = frame_new.tangent_project(u_new)
    diag = StepDiagnostics(
        tau=tau,
        sin_theta=sin_th,
        speed_defect=abs(float(np.linalg.norm(v)) - 1.0),
        tangency_defect=abs(float(u_new @ frame_new.n)),
    )
    return PhasePoint(x_new, u_new), diag


def billiard_inverse(model: SurfaceModel, p: PhasePoint):
    """f^{-1} = I o f o I with I(x, u) = (x, -u) (reversibility)."""
    q, _ = billiard_step(model, PhasePoint(p.x, -p.u))
    return PhasePoint(q.x, -q.u)


def orbit(model: SurfaceModel, p: PhasePoint, n: int):
    """Iterate the billiard map n times.

    Returns (points, diagnostics, terminated): a grazing state aborts cleanly
    and the prefix is returned with terminated=True.
    """
    pts, diags = [], []
    cur = p
    terminated = False
    for _ in range(n):
        cur, d = billiard_step(model, cur)
        if d.grazing:
            terminated = True
            break
        pts.append(cur)
        diags.append(d)
    return pts, diags, terminated


def _chart_encode(model, frame, basis, p0: PhasePoint, a, b):
    """Phase point from chart coordinates (a: position, b: velocity offsets)."""
    x = project_to_surface(model, p0.x + basis @ a)
    fr = frame_at(model, x)
    u = fr.tangent_project(p0.u + basis @ b)
    return PhasePoint(x, u)


def _chart_decode(basis, origin: PhasePoint, p: PhasePoint):
    return np.concatenate([basis.T @ (p.x - origin.x), basis.T @ (p.u - origin.u)])


def symplectic_defect(model: SurfaceModel, p: PhasePoint, h=1e-5):
    """|J^T W J - W|_max for the billiard map's chart Jacobian J.

    The chart is an orthonormal tangent frame at p (and at f(p) for readout);
    in it the ambient two-form dx ^ du restricts to the standard W at the
    base point, so an exact-symplectic map must give defect at the level of
    the finite-difference error.
    """
    frame = frame_at(model, p.x)
    basis = tangent_basis_at(frame)
    k = basis.shape[1]
    image, _ = billiard_step(model, p)
    frame_out = frame_at(model, image.x)
    basis_out = tangent_basis_at(frame_out)

    jac = np.zeros((2 * k, 2 * k))
    for j in range(2 * k):
        da = np.zeros(k)
        db = np.zeros(k)
        if j < k:
            da[j] = h
        else:
            db[j - k] = h
        plus, _ = billiard_step(model, _chart_encode(model, frame, basis, p, da, db))
        minus, _ = billiard_step(model, _chart_encode(model, frame, basis, p, -da, -db))
        jac[:, j] = (_chart_decode(basis_out, image, plus) - _chart_decode(basis_out, image, minus)) / (2 * h)

    omega = np.block([[np.zeros((k, k)), np.eye(k)], [-np.eye(k), np.zeros((k, k))]])
    return float(np.abs(jac.T @ omega @ jac - omega).max())


def random_states(model: SurfaceModel, n, rng, sin_range=(0.05, 0.95)):
    """Uniformly scattered phase points for property tests."""
    rng = np.random.default_rng(rng)
    out = []
    while len(out) < n:
        direction = rng.normal(size=model.dim)
        direction /= np.linalg.norm(direction)
        x = project_to_surface(model, 0.55 * model.diameter * direction)
        fr = frame_at(model, x)
        t = fr.tangent_project(rng.normal(size=model.dim))
        nt = np.linalg.norm(t)
        if nt < 1e-8:
            continue
        sin_th = rng.uniform(*sin_range)
        u = t / nt * np.sqrt(1.0 - sin_th**2)
        out.append(PhasePoint(x, u))
    return out


class BilliardEnsemble:
    """Vectorized billiard stepping for many states in lockstep.

    Uses the same deflated-Newton flight-time solve as the scalar path but
    with a fixed iteration budget plus a per-element bisection fallback, so a
    10^6-bounce, 10^3-seed experiment is minutes, not hours.  Per-orbit
    results are bit-deterministic: pure ufunc arithmetic, no reductions
    across seeds.
    """

    def __init__(self, model: SurfaceModel, X, U, newton_iters=12):
        self.model = model
        self.X = np.array(X, dtype=float)
        self.U = np.array(U, dtype=float)
        self.newton_iters = newton_iters
        self.active = np.ones(len(self.X), dtype=bool)
        self.tau = np.zeros(len(self.X))
        self._tau_prev = None

    def _normals(self, X):
        g = self.model.grad(X)
        gn = np.linalg.norm(g, axis=-1, keepdims=True)
        return -g / gn, gn[..., 0]

    def sin_theta(self):
        return np.sqrt(np.clip(1.0 - np.sum(self.U * self.U, axis=-1), 0.0, None))

    def kappa_w(self):
        """Curvature form on the normalized tangent direction, batched."""
        nrm = np.linalg.norm(self.U, axis=-1, keepdims=True)
        W = self.U / np.where(nrm > 0, nrm, 1.0)
        hv = self.model.hess_vec(self.X, W)
        _, gn = self._normals(self.X)
        return np.sum(hv * W, axis=-1) / gn

    def step(self):
        """Advance every active state by one bounce; returns flight times."""
        model = self.model
        act = self.active
        X, U = self.X, self.U
        n_vec, gn = self._normals(X)
        s2 = 1.0 - np.sum(U * U, axis=-1)
        grazing = s2 < GRAZING_THRESHOLD
        self.active = act & ~grazing
        act = self.active
        if not act.any():
            self.tau[:] = 0.0
            return self.tau

        sin_th = np.sqrt(np.clip(s2, 0.0, None))
        V = U + sin_th[..., None] * n_vec

        hv = model.hess_vec(X, V)
        kv = np.sum(hv * V, axis=-1) / gn
        t = np.where(kv > 0, 2.0 * sin_th / np.where(kv > 0, kv, 1.0), 0.5 * model.diameter)
        if self._tau_prev is not None:
            stale = ~np.isfinite(t) | (t <= 0)
            t = np.where(stale, self._tau_prev, t)
        t = np.clip(t, 1e-14, 4.0 * model.diameter)

        # Newton on h(t) = Q(x+tv)/t with step clamping; the seed is the
        # curvature chord estimate, accurate near the boundary
        for _ in range(self.newton_iters):
            XT = X + t[..., None] * V
            qv = model.q(XT)
            dq = np.sum(model.grad(XT) * V, axis=-1)
            hh = qv / t
            dh = (dq * t - qv) / (t * t)
            dt_step = np.where(dh != 0.0, -hh / dh, 0.0)
            dt_step = np.clip(dt_step, -0.5 * t, 1.0 * t)
            t = np.where(act, t + dt_step, t)
            t = np.clip(t, 1e-14, 4.0 * model.diameter)

        # verify; rare stragglers fall back to the scalar safeguarded path
        XT = X + t[..., None] * V
        bad = act & (np.abs(model.q(XT)) > model.on_surface_tol)
        if bad.any():
            for i in np.nonzero(bad)[0]:
                t[i] = flight_time(model, PhasePoint(X[i], U[i]))
            XT = X + t[..., None] * V

        X_new = project_batch(model, XT)
        n_new, _ = self._normals(X_new)
        U_new = V - np.sum(V * n_new, axis=-1, keepdims=True) * n_new
        U_new = U_new - np.sum(U_new * n_new, axis=-1, keepdims=True) * n_new

        self.X = np.where(act[..., None], X_new, X)
        self.U = np.where(act[..., None], U_new, U)
        self.tau = np.where(act, t, 0.0)
        self._tau_prev = self.tau.copy()
        return self.tau
