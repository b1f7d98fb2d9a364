"""Implicit strictly convex surfaces and their differential geometry.

A surface is the zero level set of a smooth Q: R^d -> R with inward unit
normal n = -grad Q / |grad Q|.  Built-ins: sphere, triaxial ellipsoid, and
either of those plus analytic tilted-Gaussian bumps.  Every evaluator is
analytic through third order; nothing in here finite-differences.

All evaluators broadcast over a leading batch axis: positions may be shaped
(d,) or (n, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvexityLost, DegenerateGradient, NoConvergence, NotOnSurface

GRAD_FLOOR = 1e-10


@dataclass(frozen=True)
class BumpSpec:
    """Analytic tilted-Gaussian bump.

    psi(x) = amplitude * exp(<tilt, x - center>) * exp(-|x - center|^2/width^2);
    referencing the tilt exponent to the center only rescales the amplitude
    relative to the uncentered form, and keeps the exponent bounded for the
    large tilts the inequality constructions need.  Strictly positive
    everywhere; `channel` (1 or 2) selects which entry of the surface's
    two-parameter amplitude pair scales it.
    """

    center: np.ndarray
    width: float
    amplitude: float
    tilt: np.ndarray
    channel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "tilt", np.asarray(self.tilt, dtype=float))
        if self.width <= 0:
            raise ValueError("bump width must be positive")
        if self.amplitude <= 0:
            raise ValueError("bump amplitude must be positive")
        if self.channel not in (1, 2):
            raise ValueError("bump channel must be 1 or 2")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        expo = d @ self.tilt - np.sum(d * d, axis=-1) / self.width**2
        return self.amplitude * np.exp(expo)

    def log_gradient(self, x):
        """grad log psi = tilt - 2 (x - center) / width^2."""
        x = np.asarray(x, dtype=float)
        return self.tilt - 2.0 * (x - self.center) / self.width**2

    def gradient(self, x):
        return self.value(x)[..., None] * self.log_gradient(x)

    def hess_vec(self, x, v):
        """(Hess psi) v for a quadratic log-profile."""
        g = self.log_gradient(x)
        gv = np.sum(g * v, axis=-1)
        return self.value(x)[..., None] * (gv[..., None] * g - 2.0 * v / self.width**2)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        g = self.log_gradient(x)
        gg = g[..., :, None] * g[..., None, :]
        eye = np.eye(x.shape[-1])
        return self.value(x)[..., None, None] * (gg - 2.0 / self.width**2 * eye)

    def third_vv(self, x, v):
        """D^3 psi [v, v, .] as a vector; third derivative of exp(quadratic)."""
        g = self.log_gradient(x)
        gv = np.sum(g * v, axis=-1)[..., None]
        hv = -2.0 * v / self.width**2
        hvv = np.sum(hv * v, axis=-1)[..., None]
        return self.value(x)[..., None] * (gv * gv * g + hvv * g + 2.0 * gv * hv)

    def max_value(self):
        """Supremum of psi over R^d (attained at center + width^2 tilt / 2)."""
        x_peak = self.center + 0.5 * self.width**2 * self.tilt
        return float(self.value(x_peak))


class SurfaceModel:
    """Base class: analytic Q with derivatives through third order.

    Subclasses implement q/grad/hess/hess_vec/third_vv.  Instances are
    immutable after construction and safe to share across workers.
    """

    dim = 3
    diameter = 2.0
    bumps: tuple[BumpSpec, ...] = ()
    eps: tuple[float, float] = (0.0, 0.0)

    def __init__(self, on_surface_tol=None):
        self._tol = on_surface_tol

    @property
    def on_surface_tol(self):
        if self._tol is not None:
            return self._tol
        return 1e-10 * self.diameter**2

    # -- derivative evaluators (subclass responsibility) -------------------
    def q(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        raise NotImplementedError

    def hess_vec(self, x, v):
        mat = self.hess(x)
        return np.einsum("...ij,...j->...i", mat, np.asarray(v, dtype=float))

    def third_vv(self, x, v):
        raise NotImplementedError

    # -- convenience -------------------------------------------------------
    def grad_norm(self, x):
        return np.linalg.norm(self.grad(x), axis=-1)

    def normal(self, x):
        g = self.grad(x)
        return -g / np.linalg.norm(g, axis=-1, keepdims=True)

    def kappa(self, x, v):
        """Curvature quadratic form <C(x) v, v> with C = Hess Q / |grad Q|."""
        v = np.asarray(v, dtype=float)
        return np.sum(self.hess_vec(x, v) * v, axis=-1) / self.grad_norm(x)


class Sphere(SurfaceModel):
    """Q(x) = (|x|^2 - radius^2) / 2."""

    def __init__(self, radius=1.0, dim=3, **kw):
        super().__init__(**kw)
        self.radius = float(radius)
        self.dim = int(dim)
        self.diameter = 2.0 * self.radius

    def q(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (np.sum(x * x, axis=-1) - self.radius**2)

    def grad(self, x):
        return np.asarray(x, dtype=float).copy()

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,)).copy()

    def hess_vec(self, x, v):
        return np.asarray(v, dtype=float).copy()

    def third_vv(self, x, v):
        return np.zeros_like(np.asarray(v, dtype=float))


class Ellipsoid(SurfaceModel):
    """Q(x) = (sum x_i^2 / a_i^2 - 1) / 2 for semi-axes a_i."""

    def __init__(self, semi_axes=(1.0, 0.8, 0.6), **kw):
        super().__init__(**kw)
        self.semi_axes = np.asarray(semi_axes, dtype=float)
        if np.any(self.semi_axes <= 0):
            raise ValueError("semi-axes must be positive")
        self.dim = self.semi_axes.size
        self.diameter = 2.0 * float(self.semi_axes.max())
        self._inv_ax2 = 1.0 / self.semi_axes**2

    def q(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (np.sum(x * x * self._inv_ax2, axis=-1) - 1.0)

    def grad(self, x):
        return np.asarray(x, dtype=float) * self._inv_ax2

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.diag(self._inv_ax2), x.shape + (self.dim,)).copy()

    def hess_vec(self, x, v):
        return np.asarray(v, dtype=float) * self._inv_ax2

    def third_vv(self, x, v):
        return np.zeros_like(np.asarray(v, dtype=float))


class PerturbedSurface(SurfaceModel):
    """Base surface plus sum over bumps of eps[channel] * amplitude * psi."""

    def __init__(self, base: SurfaceModel, bumps, eps=(0.0, 0.0), **kw):
        super().__init__(**kw)
        self.base = base
        self.bumps = tuple(bumps)
        self.eps = (float(eps[0]), float(eps[1]))
        self.dim = base.dim
        self.diameter = base.diameter
        if self._tol is None:
            self._tol = base._tol
        # bumps whose effective amplitude is exactly zero contribute nothing,
        # keeping eps=(0,0) evaluation bit-identical to the base surface
        self._live = tuple(
            (self.eps[b.channel - 1], b) for b in self.bumps if self.eps[b.channel - 1] != 0.0
        )

    def q(self, x):
        out = self.base.q(x)
        for a, b in self._live:
            out = out + a * b.value(x)
        return out

    def grad(self, x):
        out = self.base.grad(x)
        for a, b in self._live:
            out = out + a * b.gradient(x)
        return out

    def hess(self, x):
        out = self.base.hess(x)
        for a, b in self._live:
            out = out + a * b.hess(x)
        return out

    def hess_vec(self, x, v):
        out = self.base.hess_vec(x, v)
        for a, b in self._live:
            out = out + a * b.hess_vec(x, v)
        return out

    def third_vv(self, x, v):
        out = self.base.third_vv(x, v)
        for a, b in self._live:
            out = out + a * b.third_vv(x, v)
        return out


@dataclass
class GeometryFrame:
    """All pointwise geometric data of the surface at x in Gamma.

    n is the inward unit normal, curvature the matrix C = Hess Q / |grad Q|.
    The cubic forms R, r are the norm-scaled third-derivative contractions;
    normal_jet is the second derivative of the unit-normal field along v
    (what actually transports the normal between reflection points).
    """

    x: np.ndarray
    q_value: float
    grad_norm: float
    n: np.ndarray
    curvature: np.ndarray
    model: SurfaceModel = field(repr=False)

    def kappa(self, v):
        v = np.asarray(v, dtype=float)
        return float(v @ self.curvature @ v)

    def third_form(self, v):
        """R(x, v) = D^3 Q [v,v,v] / |grad Q|."""
        v = np.asarray(v, dtype=float)
        return float(self.model.third_vv(self.x, v) @ v) / self.grad_norm

    def third_form_vector(self, v):
        """r(x, v) = D^3 Q [v,v,.] / |grad Q|;  <r(v), v> = R(v) exactly."""
        v = np.asarray(v, dtype=float)
        return self.model.third_vv(self.x, v) / self.grad_norm

    def shape_operator(self, v):
        """S(x) v = C v - <C v, n> n (tangential part of the curvature image)."""
        cv = self.curvature @ np.asarray(v, dtype=float)
        return cv - (cv @ self.n) * self.n

    def normal_jet(self, v):
        """-D^2 n [v, v] for the unit-normal field n = -grad Q / |grad Q|.

        Equals r(v) plus curvature-square corrections that vanish only when
        |grad Q| is constant along the surface.
        """
        v = np.asarray(v, dtype=float)
        rt = self.third_form_vector(v)
        cv = self.curvature @ v
        cvn = cv @ self.n
        return rt + 2.0 * cvn * cv + (cv @ cv - rt @ self.n - 3.0 * cvn**2) * self.n

    def tangent_project(self, w):
        w = np.asarray(w, dtype=float)
        return w - (w @ self.n) * self.n


def frame_at(model: SurfaceModel, x) -> GeometryFrame:
    """Geometric frame at a surface point; raises if x is off the surface."""
    x = np.asarray(x, dtype=float)
    qv = float(model.q(x))
    if abs(qv) > model.on_surface_tol:
        raise NotOnSurface(f"|Q(x)| = {abs(qv):.3e} exceeds tol {model.on_surface_tol:.3e}")
    g = model.grad(x)
    gn = float(np.linalg.norm(g))
    if gn < GRAD_FLOOR:
        raise DegenerateGradient(f"|grad Q(x)| = {gn:.3e}")
    return GeometryFrame(
        x=x, q_value=qv, grad_norm=gn, n=-g / gn, curvature=model.hess(x) / gn, model=model
    )


def project_to_surface(model: SurfaceModel, x0, max_iter=50):
    """Newton projection of x0 onto {Q = 0} along the local gradient.

    Damped: a step is halved until |Q| decreases, so mild overshoot from a
    poor starting point cannot diverge.
    """
    x = np.asarray(x0, dtype=float).copy()
    tol = model.on_surface_tol
    qv = float(model.q(x))
    for _ in range(max_iter):
        if abs(qv) <= 0.01 * tol:
            return x
        g = model.grad(x)
        gg = float(g @ g)
        if gg < GRAD_FLOOR**2:
            raise DegenerateGradient("gradient vanished during projection")
        step = -qv / gg * g
        lam = 1.0
        for _ in range(30):
            x_new = x + lam * step
            q_new = float(model.q(x_new))
            if abs(q_new) < abs(qv):
                x, qv = x_new, q_new
                break
            lam *= 0.5
        else:
            raise NoConvergence("projection step could not reduce |Q|")
    if abs(qv) <= tol:
        return x
    raise NoConvergence(f"projection stalled with |Q| = {abs(qv):.3e}")


def project_batch(model: SurfaceModel, X, iters=3):
    """Vectorized fixed-iteration Newton projection for nearly-on points."""
    X = np.array(X, dtype=float)
    for _ in range(iters):
        qv = model.q(X)
        g = model.grad(X)
        X = X - (qv / np.sum(g * g, axis=-1))[..., None] * g
    return X


def tangent_project(frame: GeometryFrame, w):
    """Remove the normal component: w - <w, n> n."""
    return frame.tangent_project(w)


def perturbed_surface(model: SurfaceModel, bumps, eps) -> PerturbedSurface:
    """Attach bumps with amplitude pair eps; eps=(0,0) evaluates identically to model."""
    base = model.base if isinstance(model, PerturbedSurface) else model
    return PerturbedSurface(base, bumps, eps)


def with_eps(model: PerturbedSurface, eps) -> PerturbedSurface:
    """Same bumps, different amplitude pair."""
    return PerturbedSurface(model.base, model.bumps, eps, on_surface_tol=model._tol)


def tangential_hessian_min_eig(model: SurfaceModel, x):
    """Smallest eigenvalue of the curvature form restricted to T_x Gamma."""
    fr = frame_at(model, x)
    d = model.dim
    basis = _tangent_basis(fr.n)
    mat = basis.T @ fr.curvature @ basis
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min()), d


def check_convexity(model: SurfaceModel, n_samples=200, rng=None):
    """Sample strict convexity on the surface; raises ConvexityLost.

    Random directions cover the bulk; each bump additionally gets targeted
    samples across its support (narrow bumps would otherwise be missed).
    """
    rng = np.random.default_rng(rng if rng is not None else 0)
    points = []
    for _ in range(n_samples):
        direction = rng.normal(size=model.dim)
        direction /= np.linalg.norm(direction)
        points.append(0.55 * model.diameter * direction)
    for bump in getattr(model, "bumps", ()):
        for _ in range(40):
            offset = rng.normal(size=model.dim) * bump.width
            points.append(bump.center + offset)
        points.append(bump.center.copy())
    worst = np.inf
    for x0 in points:
        x = project_to_surface(model, x0)
        eig, _ = tangential_hessian_min_eig(model, x)
        worst = min(worst, eig)
    if worst <= 0:
        raise ConvexityLost(f"min sampled tangential curvature eigenvalue {worst:.3e}")
    return worst


def _tangent_basis(n):
    """Orthonormal basis of the hyperplane orthogonal to unit vector n."""
    d = n.size
    basis = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        v = e - (e @ n) * n
        for b in basis:
            v = v - (v @ b) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
        if len(basis) == d - 1:
            break
    return np.column_stack(basis)


def tangent_basis_at(frame: GeometryFrame):
    return _tangent_basis(frame.n)


def build_surface(kind, semi_axes=(1.0, 0.8, 0.6), radius=1.0, bumps=(), eps=(0.0, 0.0), tol=None):
    """Construct a built-in surface by name: sphere | ellipsoid | perturbed."""
    if kind == "sphere":
        return Sphere(radius=radius, on_surface_tol=tol)
    if kind == "ellipsoid":
        return Ellipsoid(semi_axes=semi_axes, on_surface_tol=tol)
    if kind == "perturbed":
        base = Ellipsoid(semi_axes=semi_axes, on_surface_tol=tol)
        return PerturbedSurface(base, bumps, eps, on_surface_tol=tol)
    raise ValueError(f"unknown surface kind {kind!r}")
