"""Constrained geodesic flow on the surface in ambient coordinates.

Equations of motion: xdot = u, udot = kappa(x, u) n(x).  The flow conserves
|u|^2/2 and stays on the tangent bundle; numerically we re-project after
every accepted step and monitor the drift rather than assume it away.

Variational (monodromy) dynamics use the analytic on-shell Jacobian of the
Hamiltonian extension H = u^2/2 + kappa(x,u) Q/|grad Q|, which makes the
2d x 2d monodromy symplectic up to integrator tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rk import integrate
from .surfaces import SurfaceModel, frame_at, project_to_surface


@dataclass
class FlowState:
    x: np.ndarray
    u: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.u = np.asarray(self.u, dtype=float)

    def energy(self):
        return 0.5 * float(self.u @ self.u)


def geodesic_field(model: SurfaceModel, state: FlowState):
    """(xdot, udot) = (u, kappa(x,u) n(x))."""
    fr = frame_at(model, state.x)
    return state.u.copy(), fr.kappa(state.u) * fr.n


def _field_raw(model, x, u):
    g = model.grad(x)
    gn = np.linalg.norm(g)
    n = -g / gn
    kap = float(model.hess_vec(x, u) @ u) / gn
    return u, kap * n


def _jacobian_blocks(model, x, u):
    """On-shell Jacobian of the Hamiltonian extension of the geodesic field.

    Returns (A, C, D) with  d(dx)/dt = A dx + du,  d(du)/dt = C dx + D du.
    C is symmetric by construction.
    """
    g = model.grad(x)
    gn = np.linalg.norm(g)
    n = -g / gn
    C_mat = model.hess(x) / gn
    cu = C_mat @ u
    cn = C_mat @ n
    kap = float(cu @ u)
    rt = model.third_vv(x, u) / gn
    rho = rt + kap * cn
    A = -2.0 * np.outer(cu, n)
    C = (
        np.outer(rho, n)
        + np.outer(n, rho)
        - kap * C_mat
        + kap * (np.outer(n, cn) + np.outer(cn, n))
    )
    D = 2.0 * np.outer(n, cu)
    return A, C, D


def _project_state(model, x, u):
    x = project_to_surface(model, x)
    g = model.grad(x)
    n = -g / np.linalg.norm(g)
    return x, u - (u @ n) * n


def flow(model: SurfaceModel, state: FlowState, t, tol=1e-10, renormalize=False):
    """Adaptive integration of the geodesic flow for time t."""
    d = model.dim
    speed0 = np.linalg.norm(state.u)

    def field(_, y):
        dx, du = _field_raw(model, y[:d], y[d:])
        return np.concatenate([dx, du])

    def post(y):
        x, u = _project_state(model, y[:d], y[d:])
        if renormalize and speed0 > 0:
            u = u * (speed0 / np.linalg.norm(u))
        return np.concatenate([x, u])

    y0 = np.concatenate([state.x, state.u])
    t_end, y = integrate(field, y0, (state.t, state.t + t), tol, postprocess=post)
    return FlowState(y[:d], y[d:], t_end)


def flow_with_variationals(model: SurfaceModel, state: FlowState, t, tol=1e-10):
    """Flow plus the 2d x 2d linearization (monodromy) over [0, t]."""
    d = model.dim

    def field(_, y):
        x, u = y[:d], y[d : 2 * d]
        dx, du = _field_raw(model, x, u)
        A, C, D = _jacobian_blocks(model, x, u)
        M = y[2 * d :].reshape(2 * d, 2 * d)
        top = M[:d]
        bot = M[d:]
        dM_top = A @ top + bot
        dM_bot = C @ top + D @ bot
        return np.concatenate([dx, du, dM_top.ravel(), dM_bot.ravel()])

    def post(y):
        x, u = _project_state(model, y[:d], y[d : 2 * d])
        return np.concatenate([x, u, y[2 * d :]])

    y0 = np.concatenate([state.x, state.u, np.eye(2 * d).ravel()])
    t_end, y = integrate(field, y0, (state.t, state.t + t), tol, postprocess=post)
    mon = y[2 * d :].reshape(2 * d, 2 * d)
    return FlowState(y[:d], y[d : 2 * d], t_end), mon


def monodromy_symplectic_defect(mon):
    d2 = mon.shape[0]
    d = d2 // 2
    omega = np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])
    return float(np.abs(mon.T @ omega @ mon - omega).max())


def hamiltonian(model: SurfaceModel, x, u):
    """H = u^2/2 + kappa(x,u) Q(x)/|grad Q(x)| (second term vanishes on TGamma)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    g = model.grad(x)
    gn = np.linalg.norm(g)
    kap = float(model.hess_vec(x, u) @ u) / gn
    return 0.5 * float(u @ u) + kap * float(model.q(x)) / gn
