"""Holonomy and scattering maps on the near-boundary cylinder.

The quotient phase phi = frac(theta / tau_star) requires 1/tau_star to be an
integer for the circle quotient to be well defined; tau_star is snapped to
the nearest 1/m everywhere in this module.

Asymptotic phases are measured two ways:
  * exactly for the interpolating flow, by quadrature along the certified
    homoclinic path (the offsets stored on HomoclinicRecord), and
  * for the billiard map, by Aitken extrapolation of the per-loop phase
    defect of actual orbits entering the tube around gamma.

The first-order response of the scattering map to a surface bump is
evaluated in closed form from the on-shell perturbation Hamiltonian
restricted to the cylinder, against the numerically measured area density
h (omega restricted to the cylinder = h dphi ^ dy), and cross-validated by
Richardson finite differences of the full map between perturbed surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .billiards import PhasePoint, billiard_inverse, billiard_step
from .errors import (
    DegenerateChart,
    GrazingState,
    NoiseDominated,
    NoTubeEntry,
    SupportViolation,
    TailNotConverging,
)
from .structures import ClosedGeodesicRecord, CylinderPoint, HomoclinicRecord, cylinder_lift
from .surfaces import (BumpSpec, PerturbedSurface, SurfaceModel, frame_at,
                       project_to_surface, with_eps)


def snap_tau_star(tau_star):
    """Snap to 1/m (m integer >= 2); returns (snapped value, m)."""
    m = max(2, int(round(1.0 / tau_star)))
    return 1.0 / m, m


# ---------------------------------------------------------------------------
# asymptotic phases of billiard orbits
# ---------------------------------------------------------------------------


@dataclass
class PhaseEstimate:
    a: float
    y: float
    n_steps: int
    tail_error: float
    samples: list = field(default_factory=list)


def _cylinder_data(model, rec, tau_star, p):
    """(theta, y, dist) of a phase point without the tube check."""
    t_near, dist = rec.nearest_time(p.x)
    theta = rec.theta_at(t_near)
    speed2 = float(p.u @ p.u)
    sin_th = np.sqrt(max(1e-300, 1.0 - speed2))
    w = p.u / np.sqrt(speed2)
    fr = frame_at(model, p.x)
    kap = fr.kappa(w)
    z = 2.0 * sin_th / (tau_star * kap)
    y = 1.0 / (z * kap ** (2.0 / 3.0))
    return theta, y, dist


def asymptotic_phase(model: SurfaceModel, rec: ClosedGeodesicRecord, start: PhasePoint,
                     direction, tau_star, tube_radius=None, max_steps=60000,
                     n_tail=5, extrapolation_tol=5e-2, n_loops=None, pinned=False):
    """Billiard-orbit asymptotic phase defect on the quotient cylinder.

    Iterates f (forward) or f^{-1} (backward) from `start`; once the orbit is
    inside the tube the running defect A_k = phi_k - sum_j y_j^{-1} is
    sampled at every loop around gamma and Aitken-extrapolated.  Returns the
    phase (mod 1), the limiting height y, and a tail-error estimate.
    """
    tau_star, m = snap_tau_star(tau_star)
    if tube_radius is None:
        tube_radius = 0.08 * rec.period
    if n_loops is None:
        n_loops = n_tail + 6
    sign = 1.0 if direction == "forward" else -1.0
    p = start.copy()
    defect = None
    acc = 0.0
    in_tube = False
    th_list = []
    d_list = []
    dist_list = []
    y_list = []
    th_unwrapped = None
    outside_run = 0
    for k in range(max_steps):
        theta, y, dist = _cylinder_data(model, rec, tau_star, p)
        if dist <= tube_radius or (in_tube and dist <= 2.5 * tube_radius):
            in_tube = True
            # leaving the core tube for more than half a loop means the
            # orbit has genuinely escaped (distance oscillates within loops,
            # so a grace region alone cannot distinguish the two)
            if dist <= tube_radius:
                outside_run = 0
            else:
                outside_run += 1
                if outside_run > 0.5 * rec.K_inv * y / tau_star:
                    break
            phi = (theta * m) % 1.0
            d_now = phi - acc
            if defect is not None:
                # unwrap for continuity
                d_now -= round(d_now - defect)
            defect = d_now
            if th_unwrapped is None:
                th_unwrapped = theta
            else:
                # unwrap theta by continuity (increments are < 1/2 per bounce)
                delta_th = theta - (th_unwrapped % 1.0)
                delta_th -= round(delta_th)
                th_unwrapped += delta_th
            th_list.append(th_unwrapped)
            d_list.append(defect)
            dist_list.append(dist)
            y_list.append(y)
            if len(th_list) > 3 and abs(th_list[-1] - th_list[0]) > n_loops + 2:
                break
        elif in_tube and dist > 2.5 * tube_radius:
            break
        # the defect is referenced at the starting fiber point, so the
        # frequency sum runs over every step, excursion included (y is the
        # adiabatic invariant and stays meaningful along the whole orbit)
        acc += sign / (rec.K_inv * y)
        try:
            if direction == "forward":
                p, diag = billiard_step(model, p)
                if diag.grazing:
                    break
            else:
                p = billiard_inverse(model, p)
        except GrazingState:
            break
    if len(th_list) < 8:
        raise NoTubeEntry(f"too few tube samples ({direction})")
    th = sign * np.asarray(th_list)   # increasing along the iteration
    dd = np.asarray(d_list)
    dists = np.asarray(dist_list)
    if not np.all(np.diff(th) > -1e-9):
        order = np.argsort(th)
        th, dd, dists = th[order], dd[order], dists[order]
    # integral loop means over windows aligned to integer absolute phase:
    # content varies smoothly with the surface, unlike per-wrap binning
    j0 = int(np.ceil(th[0] + 1e-9))
    loop_means = []
    loop_dists = []
    while True:
        a, b = j0 + len(loop_means), j0 + len(loop_means) + 1
        if b > th[-1]:
            break
        loop_means.append(_window_mean(th, dd, a, b))
        sel = (th >= a) & (th <= b)
        loop_dists.append(float(dists[sel].min()) if sel.any() else float("inf"))
        if len(loop_means) >= n_loops:
            break
    if not loop_means:
        raise NoTubeEntry(f"never sampled a full loop inside the tube ({direction})")
    y_lim = float(y_list[-1])
    r_known = min(1.0 / abs(rec.multiplier), 0.5)
    if pinned:
        # derivative stencils need smooth dependence on the surface: fixed
        # window count and contraction ratio, no data-driven selection
        if len(loop_means) < n_loops:
            raise NoTubeEntry(
                f"pinned evaluation needs {n_loops} loops, got {len(loop_means)}")
        tail = loop_means[-2:]
        est = tail[-1] + (tail[-1] - tail[-2]) * r_known / (1.0 - r_known)
        return PhaseEstimate(a=est % 1.0, y=y_lim, n_steps=k,
                             tail_error=abs(tail[-1] - tail[-2]), samples=loop_means)
    turn = int(np.argmin(loop_dists)) + 1
    usable = loop_means[:max(turn, min(2, len(loop_means)))]
    tail = usable[-n_tail:]
    # geometric extrapolation: the loop means converge like a + A r^k until
    # the lift miss takes over; fit r when the samples support it (clamped:
    # ratios near 1 amplify noise), else use the per-loop contraction
    r = r_known
    if len(tail) >= 3 and abs(tail[-2] - tail[-3]) > 1e-14:
        r_fit = (tail[-1] - tail[-2]) / (tail[-2] - tail[-3])
        if 0.0 < r_fit < 0.5:
            r = r_fit
    if len(tail) >= 2:
        est = tail[-1] + (tail[-1] - tail[-2]) * r / (1.0 - r)
        tail_err = abs(tail[-1] - tail[-2]) * r / (1.0 - r) + 1e-15
        if len(tail) >= 3:
            est_prev = tail[-2] + (tail[-2] - tail[-3]) * r / (1.0 - r)
            tail_err = abs(est - est_prev)
    else:
        est = tail[-1]
        tail_err = float("nan")
    if len(tail) >= 3 and tail_err > extrapolation_tol:
        raise TailNotConverging(f"tail estimates differ by {tail_err:.3e}")
    return PhaseEstimate(a=est % 1.0, y=y_lim, n_steps=k, tail_error=float(tail_err),
                         samples=usable)


def _window_mean(th, dd, a, b):
    """Trapezoidal mean of the piecewise-linear defect over [a, b] in phase."""
    da = float(np.interp(a, th, dd))
    db = float(np.interp(b, th, dd))
    inside = (th > a) & (th < b)
    xs = np.concatenate([[a], th[inside], [b]])
    ys = np.concatenate([[da], dd[inside], [db]])
    return float(np.trapz(ys, xs) / (b - a))


def _aitken_seq(seq):
    s = [float(v) for v in seq]
    while len(s) >= 3:
        nxt = []
        for a, b, c in zip(s[:-2], s[1:-1], s[2:]):
            den = c - 2 * b + a
            nxt.append(c - (c - b) ** 2 / den if abs(den) > 1e-300 else c)
        s = nxt
    return s[-1]


# ---------------------------------------------------------------------------
# scattering map
# ---------------------------------------------------------------------------


@dataclass
class ScatteringSample:
    point_in: CylinderPoint
    point_out: CylinderPoint
    a_plus: float
    a_minus: float
    delta: float
    tail_error: float
    n_steps: int


def fiber_state(model, rec, hom: HomoclinicRecord, point: CylinderPoint, tau_star,
                which="minus", domain_shift=0):
    """Phase point on the homoclinic fiber matching the requested phi.

    `which` selects the asymptotic side used for the matching offset
    ('minus': backward phase equals point.phi); domain_shift moves the
    placement by whole quotient domains along the path.
    """
    tau_star, m = snap_tau_star(tau_star)
    a_ref = hom.a_minus if which == "minus" else hom.a_plus
    # theta_travel value T with frac(m (a_ref + T)) = phi, T near 0
    t_exact = (point.phi / m) - a_ref
    k = round(-t_exact / tau_star) + domain_shift
    t_val = t_exact + k * tau_star
    q = hom.q_at_theta_travel(t_val)
    x, w = hom.state_at(q)
    x = project_to_surface(model, x)
    fr = frame_at(model, x)
    w = fr.tangent_project(w)
    w /= np.linalg.norm(w)
    kap = fr.kappa(w)
    z = 1.0 / (point.y * kap ** (2.0 / 3.0))
    sin_th = 0.5 * tau_star * z * kap
    if not (0.0 < sin_th < 1.0):
        raise GrazingState(f"fiber lift needs sin theta = {sin_th:.3g}")
    return PhasePoint(x, w * np.sqrt(1.0 - sin_th**2))


def scattering_map(model: SurfaceModel, rec: ClosedGeodesicRecord, hom: HomoclinicRecord,
                   point: CylinderPoint, tau_star, method="billiard",
                   n_loops=None, max_steps=60000, placement="median",
                   pinned=False) -> ScatteringSample:
    """Compose the inverse unstable holonomy with the stable holonomy.

    method='billiard' measures both asymptotic phases on actual billiard
    orbits; method='zflow' uses the exact quadrature offsets of the
    interpolating flow (phi' = phi + Delta, y' = y).
    """
    tau_star, m = snap_tau_star(tau_star)
    if method == "zflow":
        delta = (m * ((hom.a_plus - hom.a_minus) % 1.0)) % 1.0
        out = CylinderPoint((point.phi + delta) % 1.0, point.y)
        return ScatteringSample(point, out, hom.a_plus, hom.a_minus, delta, 0.0, 0)

    def evaluate(shift):
        start = fiber_state(model, rec, hom, point, tau_star, which="minus",
                            domain_shift=shift)
        back = asymptotic_phase(model, rec, start, "backward", tau_star,
                                n_loops=n_loops, max_steps=max_steps, pinned=pinned)
        # the measured backward phase must reproduce the requested phi;
        # an off-line value flags a bad placement along the path
        if not pinned and abs(_signed_frac(back.a - point.phi)) > 0.1:
            raise NoTubeEntry("inconsistent backward phase at this placement")
        fwd = asymptotic_phase(model, rec, start, "forward", tau_star,
                               n_loops=n_loops, max_steps=max_steps, pinned=pinned)
        return back, fwd

    if placement == "median":
        evals = []
        for shift in (0, 1, -1, 2, -2):
            try:
                evals.append(evaluate(shift))
            except (NoTubeEntry, TailNotConverging):
                continue
            if len(evals) >= 3:
                break
        if not evals:
            raise NoTubeEntry("no consistent fiber placement found")
        deltas = np.array([(f.a - b.a) % 1.0 for b, f in evals])
        center = (deltas - deltas[0] + 0.5) % 1.0 - 0.5
        back, fwd = evals[int(np.argsort(center)[len(center) // 2])]
    else:
        back, fwd = evaluate(int(placement))
    delta = (fwd.a - back.a) % 1.0
    phi_out = (point.phi + delta) % 1.0
    out = CylinderPoint(phi_out, fwd.y)
    return ScatteringSample(point, out, fwd.a, back.a, delta,
                            max(fwd.tail_error, back.tail_error),
                            fwd.n_steps + back.n_steps)


# ---------------------------------------------------------------------------
# perturbation calculus
# ---------------------------------------------------------------------------


@dataclass
class PerturbationFrame:
    """First-order response of one billiard step to the surface bump.

    d(image)/d eps = (flight_time_rate * v, velocity_rate), and the pair is
    Hamiltonian: dH/du = flight_time_rate * v, -dH/dx = velocity_rate, where
    H is `hamiltonian` and v the incoming chord direction at the arrival
    point.
    """

    flight_time_rate: float
    normal_rate: np.ndarray
    velocity_rate: np.ndarray
    hamiltonian: float


def bump_value_gradient(bump: BumpSpec, x):
    return float(bump.value(x)), bump.gradient(x)


def perturbation_frame(model: SurfaceModel, bump: BumpSpec, state: PhasePoint) -> PerturbationFrame:
    """Theta, V, Pi, H_pert at the arrival state (x, u) for a unit-eps bump."""
    x, u = state.x, state.u
    speed2 = float(u @ u)
    one_minus = 1.0 - speed2
    if one_minus < 1e-14:
        raise GrazingState("perturbation frame is singular at the phase-space boundary")
    sin_th = np.sqrt(one_minus)
    fr = frame_at(model, x)
    n = fr.n
    v = u - sin_th * n
    v_out = u + sin_th * n
    psi, grad_psi = bump_value_gradient(bump, x)
    theta = -psi / (fr.grad_norm * sin_th)
    sv = fr.shape_operator(v)
    v_rate = -theta * sv - (grad_psi - (grad_psi @ n) * n) / fr.grad_norm
    pi = sin_th * v_rate - float(v @ v_rate) * n
    cv = fr.curvature @ v
    ham = psi / fr.grad_norm * (sin_th + float(n @ u)) + (
        theta * float(cv @ v_out) + float(grad_psi @ v_out) / fr.grad_norm
    ) * fr.q_value / fr.grad_norm
    return PerturbationFrame(flight_time_rate=float(theta), normal_rate=v_rate,
                             velocity_rate=pi, hamiltonian=float(ham))


def perturbation_hamiltonian(model: SurfaceModel, bump: BumpSpec, x, u):
    """H_pert as a formula on (x, u), evaluable slightly off shell (for FD)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    g = model.grad(x)
    gn = float(np.linalg.norm(g))
    n = -g / gn
    sin_th = np.sqrt(max(1e-300, 1.0 - float(u @ u)))
    v = u - sin_th * n
    v_out = u + sin_th * n
    psi = float(bump.value(x))
    grad_psi = bump.gradient(x)
    theta = -psi / (gn * sin_th)
    cv = model.hess_vec(x, v) / gn
    q = float(model.q(x))
    return psi / gn * (sin_th + float(n @ u)) + (
        theta * float(cv @ v_out) + float(grad_psi @ v_out) / gn
    ) * q / gn


# ---------------------------------------------------------------------------
# cylinder area density and closed-form scattering derivatives
# ---------------------------------------------------------------------------


def symplectic_density(model: SurfaceModel, rec: ClosedGeodesicRecord, tau_star,
                       point: CylinderPoint, step=1e-4):
    """h with omega|_cylinder = h dphi ^ dy, from differenced chart vectors."""
    tau_star, _ = snap_tau_star(tau_star)
    from .structures import lift_at_theta

    def lift(phi, y):
        # continuous local section: raw theta, no wrap of phi into [0, 1)
        p = lift_at_theta(model, rec, tau_star, tau_star * phi, y)
        return np.concatenate([p.x, p.u])

    d = model.dim
    dphi = (lift(point.phi + step, point.y) - lift(point.phi - step, point.y)) / (2 * step)
    dy = (lift(point.phi, point.y + step) - lift(point.phi, point.y - step)) / (2 * step)
    h = float(dphi[:d] @ dy[d:] - dphi[d:] @ dy[:d])
    if abs(h) < 1e-300:
        raise DegenerateChart("vanishing cylinder area density")
    return h


@dataclass
class ScatteringDerivative:
    d_phi: float
    d_y: float
    method: str
    density: float
    tau_star: float
    detail: dict = field(default_factory=dict)


def _path_geometry(model, hom, q):
    """(psi-independent data) along the homoclinic path at arclength q."""
    x, w = hom.state_at(q)
    x = project_to_surface(model, x)
    fr = frame_at(model, x)
    w = fr.tangent_project(w)
    w /= np.linalg.norm(w)
    kap = fr.kappa(w)
    cw = fr.curvature @ w
    rt = fr.third_form(w)
    return x, w, fr, kap, float(cw @ fr.n), rt


def melnikov_G(model, hom, bump, q):
    """G(q) = psi kappa^(1/3) / |grad Q| and its path derivative G'(q)."""
    x, w, fr, kap, cwn, rt = _path_geometry(model, hom, q)
    psi = float(bump.value(x))
    grad_psi = bump.gradient(x)
    g_val = psi * kap ** (1.0 / 3.0) / fr.grad_norm
    g_der = (kap ** (1.0 / 3.0) / fr.grad_norm) * (
        float(grad_psi @ w) + psi * (rt / (3.0 * kap) + 2.0 * cwn)
    )
    return g_val, g_der


def bump_transits(model, rec, hom, bump: BumpSpec, point: CylinderPoint, tau_star,
                  max_steps=60000, support_rel=1e-8, domain_shift=0):
    """Path positions q where the fiber orbit of `point` crosses the bump.

    Iterates the unperturbed billiard from the fiber state both ways and
    projects every sample inside the bump's effective support onto the
    homoclinic path.  These transit points anchor the closed-form
    derivative evaluation (the interpolating-flow grid is O(tau_star) off
    the true orbit, which matters once the bump is narrower than a domain).
    """
    tau_star, m = snap_tau_star(tau_star)
    start = fiber_state(model, rec, hom, point, tau_star, domain_shift=domain_shift)
    peak = bump.max_value()
    qs = []
    for direction in (+1, -1):
        p = start.copy()
        left_support = 0
        for k in range(max_steps):
            val = float(bump.value(p.x))
            if val > support_rel * peak:
                qs.append(_nearest_path_q(hom, p.x))
                left_support = 0
            else:
                left_support += 1
                if qs and left_support > 200:
                    break
                if not qs and k > max_steps // 2:
                    break
            try:
                if direction > 0:
                    p, diag = billiard_step(model, p)
                    if diag.grazing:
                        break
                else:
                    p = billiard_inverse(model, p)
            except GrazingState:
                break
    return sorted(qs)


def _nearest_path_q(hom, x):
    d2 = np.sum((hom.xs - x) ** 2, axis=1)
    i = int(np.argmin(d2))
    lo = max(0, i - 2)
    hi = min(len(hom.qs) - 1, i + 2)
    a, b = hom.qs[lo], hom.qs[hi]
    best_q, best_d = hom.qs[i], d2[i]
    for _ in range(4):
        qq = np.linspace(a, b, 17)
        for q in qq:
            xx, _ = hom.state_at(q)
            dd = float(np.sum((xx - x) ** 2))
            if dd < best_d:
                best_q, best_d = q, dd
        half = (b - a) / 8.0
        a, b = best_q - half, best_q + half
    return float(best_q)


def check_bump_support(model, rec: ClosedGeodesicRecord, bump: BumpSpec, rel_tol=1e-12):
    """Bump must be negligible on the closed geodesic (else the one-domain
    reduction of the melnikov sum fails)."""
    vals = bump.value(rec.xs)
    peak = bump.max_value()
    worst = float(np.max(vals)) / peak
    if worst > rel_tol:
        raise SupportViolation(
            f"bump reaches {worst:.2e} of its peak on the closed geodesic (tol {rel_tol:g})"
        )
    return worst


def scattering_derivative_closed_form(model: SurfaceModel, rec: ClosedGeodesicRecord,
                                      hom: HomoclinicRecord, bump: BumpSpec,
                                      point: CylinderPoint, tau_star,
                                      density=None, n_side=None,
                                      transits=None) -> ScatteringDerivative:
    """First-order scattering response from the reduced melnikov potential.

    The potential on the cylinder is M(phi, y) = tau_star y^{-1} sum of
    G(q_j) over the orbit's bump transits, with G = psi kappa^(1/3)/|grad Q|
    (the factor two relative to the one-sided perturbation hamiltonian is
    the reflection doubling of the length response).  The response is the
    h-weighted Hamiltonian field with the y-gradient in the fixed-position
    gauge: dPsi/d eps = -M/(y h), dY/d eps = -(dM/dphi)/h.

    `transits` (from bump_transits) anchors the evaluation on the actual
    orbit; without it the interpolating-flow grid is used, which is only
    adequate when the bump is wide compared to the O(tau_star) phase drift.
    """
    tau_star, m = snap_tau_star(tau_star)
    check_bump_support(model, rec, bump)
    if density is None:
        density = symplectic_density(model, rec, tau_star, point)
    phi, y = point.phi, point.y
    k_inv = rec.K_inv

    # the input fiber slice (backward-holonomy matched, as in fiber_state):
    # its path position is y-independent (the holonomy offsets are), so only
    # the iterate stepping dth = tau_star/(K_inv y) carries y-dependence
    t_exact = phi * tau_star - hom.a_minus
    t0 = t_exact + round(-t_exact / tau_star) * tau_star
    dth = tau_star / (k_inv * y)
    if transits is not None:
        # anchor the iterate grid on the supplied orbit transit points;
        # indices advance strictly (consecutive transits are consecutive
        # iterates even when rounding would collapse them)
        pairs = []
        prev_j = None
        for q_m in sorted(transits):
            t_m = hom.theta_travel_at(q_m)
            j = int(round((t_m - t0) / dth))
            if prev_j is not None and j <= prev_j:
                j = prev_j + 1
            pairs.append((j, float(q_m)))
            prev_j = j
    else:
        q_peak_idx = int(np.argmax(bump.value(hom.xs)))
        t_peak = hom.theta_travel[q_peak_idx]
        base_shift = round((t_peak - t0) / dth)
        if n_side is None:
            # cover the bump's support in whole quotient domains
            dq_domain = dth * k_inv  # kappa^(2/3)-weighted arclength per domain
            n_side = max(2, int(np.ceil(3.5 * bump.width / dq_domain)) + 1)
        pairs = []
        for mm in range(base_shift - n_side, base_shift + n_side + 1):
            t_m = t0 + mm * dth
            if not (hom.theta_travel[0] < t_m < hom.theta_travel[-1]):
                continue
            pairs.append((mm, float(hom.q_at_theta_travel(t_m))))
    # melnikov potential of the billiard family: twice the on-shell
    # perturbation hamiltonian summed over the orbit's bump transits (the
    # doubling is the reflection factor in the length response); the
    # y-gradient is taken in the fixed-position gauge, where only the
    # sin-theta weight depends on y
    m_val = 0.0
    dm_dphi = 0.0
    terms = []
    for mm, q_m in pairs:
        g_val, g_der = melnikov_G(model, hom, bump, q_m)
        _, _, _, kap, _, _ = _path_geometry(model, hom, q_m)
        kfac = kap ** (-2.0 / 3.0)
        m_val += 2.0 * 0.5 * tau_star / y * g_val
        dm_dphi += 2.0 * 0.5 * tau_star**2 * k_inv / y * kfac * g_der
        terms.append({"m": mm, "q": float(q_m), "G": g_val, "Gp": g_der})
    d_phi_out = -m_val / (y * density)
    d_y_out = -dm_dphi / density
    return ScatteringDerivative(
        d_phi=d_phi_out, d_y=d_y_out,
        method="closed_form", density=density, tau_star=tau_star,
        detail={"terms": terms, "m": m},
    )


def scattering_derivative_fd(model_family, rec, hom, point: CylinderPoint, tau_star,
                             d_eps=1e-4, n_loops=4, max_steps=60000,
                             density=None, placement_shift=0) -> ScatteringDerivative:
    """Richardson finite differences of the scattering map in eps.

    model_family(eps) must return the surface at perturbation size eps; the
    closed geodesic must be (numerically) unmoved by the perturbation, which
    check_bump_support guarantees for admissible bumps.  All discrete
    choices (fiber placement, loop counts) are pinned across the stencil so
    the tail-truncation bias cancels in the differences.
    """
    tau_star, m = snap_tau_star(tau_star)

    def diff(de):
        outs = []
        for sgn in (+1.0, -1.0):
            s_eps = model_family(sgn * de)
            res = scattering_map(s_eps, rec, hom, point, tau_star,
                                 n_loops=n_loops, max_steps=max_steps,
                                 placement=placement_shift, pinned=True)
            outs.append(res)
        dphi = _signed_frac(outs[0].point_out.phi - outs[1].point_out.phi) / (2 * de)
        dy = (outs[0].point_out.y - outs[1].point_out.y) / (2 * de)
        return np.array([dphi, dy])

    d1 = diff(d_eps)
    d2 = diff(0.5 * d_eps)
    rich = (4.0 * d2 - d1) / 3.0
    scale = np.maximum(np.abs(rich), 1e-12)
    disagree = float(np.max(np.abs(d1 - d2) / scale))
    if disagree > 0.2:
        raise NoiseDominated(
            f"fd estimates at d_eps and d_eps/2 differ by {disagree:.1%}"
        )
    return ScatteringDerivative(
        d_phi=float(rich[0]), d_y=float(rich[1]), method="finite_difference",
        density=density if density is not None else float("nan"),
        tau_star=tau_star,
        detail={"coarse": d1.tolist(), "fine": d2.tolist(), "d_eps": d_eps},
    )


def _signed_frac(x):
    x = x % 1.0
    return x - 1.0 if x > 0.5 else x
