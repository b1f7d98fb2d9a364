"""Experiment registry and execution: config in, CSV/JSON artifacts out.

Every artifact carries the config hash; a run-manifest JSON records the
hash, package version, and wall time.  Exit status contract: 0 = pass,
2 = an acceptance-style check failed, 1 = error.  Worker-pool parallel
sections reduce in fixed index order so results are independent of the
worker count.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .billiards import PhasePoint, billiard_step, orbit, random_states, symplectic_defect
from .config import EXPERIMENT_KINDS, ExperimentConfig, load_config
from .diffusion import (
    DEFAULT_ARCS,
    build_ifs,
    channel_seeds,
    check_lipschitz_conditions,
    direct_diffusion_experiment,
    pseudo_orbit_search,
    tilt_constant,
    validate_ifs_interpolation,
)
from .errors import ConfigInvalid, DegenerateSpectrum, DoubledSeparatrix, GlanceError
from .nearboundary import fit_sweep, residual_sweep, tau_schedule
from .scattering import (
    bump_transits,
    check_bump_support,
    scattering_derivative_closed_form,
    scattering_derivative_fd,
    scattering_map,
    snap_tau_star,
    symplectic_density,
)
from .structures import (
    CylinderPoint,
    classify_floquet,
    cylinder_coordinates,
    cylinder_lift,
    find_closed_geodesic,
    find_homoclinic,
    _trace_homoclinic,
)
from .surfaces import (
    check_convexity,
    frame_at,
    project_to_surface,
    tangent_project,
    with_eps,
)

PASS, FAIL, ERROR = 0, 2, 1


def write_csv(path, header, rows, config_hash):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_json(path, payload, config_hash):
    payload = dict(payload)
    payload["config_hash"] = config_hash
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def parallel_map(fn, items, workers):
    """Ordered map; a process pool when workers > 1, else serial."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _seed_state(model, cfg, point_key, direction_key):
    x = project_to_surface(model, np.asarray(cfg[point_key], dtype=float))
    fr = frame_at(model, x)
    t = fr.tangent_project(np.asarray(cfg[direction_key], dtype=float))
    return x, t / np.linalg.norm(t)


def run_verify_geometry(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    rng = np.random.default_rng(cfg["run.seed"])
    rows = []
    ok = True
    min_eig = check_convexity(model, 100, rng=cfg["run.seed"])
    rows.append(("convexity_min_eig", min_eig, min_eig > 0))
    ok &= min_eig > 0
    # cubic-form pairing and finite-difference agreement
    worst_pair = 0.0
    worst_fd = 0.0
    for _ in range(100):
        direction = rng.normal(size=model.dim)
        x = project_to_surface(model, 0.55 * model.diameter * direction / np.linalg.norm(direction))
        fr = frame_at(model, x)
        v = rng.normal(size=model.dim)
        worst_pair = max(worst_pair, abs(fr.third_form_vector(v) @ v - fr.third_form(v)))
        h = 1e-5
        for axis in range(model.dim):
            e = np.zeros(model.dim)
            e[axis] = h
            fd = (model.q(x + e) - model.q(x - e)) / (2 * h)
            g = model.grad(x)[axis]
            worst_fd = max(worst_fd, abs(fd - g) / max(1.0, abs(g)))
    rows.append(("cubic_pairing_max", worst_pair, worst_pair < 1e-12))
    rows.append(("gradient_fd_rel", worst_fd, worst_fd < 1e-6))
    ok &= worst_pair < 1e-12 and worst_fd < 1e-6
    write_json(out / "geometry_report.json",
               {"checks": [{"name": n, "value": v, "pass": bool(p)} for n, v, p in rows],
                "pass": bool(ok)}, cfg.config_hash)
    return PASS if ok else FAIL


def run_billiard_orbit(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    x, t = _seed_state(model, cfg, "billiard.start_point", "billiard.start_direction")
    sin_th = cfg["billiard.sin_theta"]
    p = PhasePoint(x, t * np.sqrt(1.0 - sin_th**2))
    pts, diags, terminated = orbit(model, p, cfg["billiard.n_bounces"])
    rows = []
    for i, (q, d) in enumerate(zip(pts, diags)):
        rows.append([i + 1, *q.x, *q.u, d.tau, d.sin_theta, d.speed_defect, d.tangency_defect])
    d = model.dim
    header = (["n"] + [f"x{i+1}" for i in range(d)] + [f"u{i+1}" for i in range(d)]
              + ["tau", "sin_theta", "speed_defect", "tangency_defect"])
    write_csv(out / "orbit.csv", header, rows, cfg.config_hash)
    write_json(out / "orbit_summary.json",
               {"bounces": len(pts), "terminated": terminated,
                "max_tangency_defect": max((r[-1] for r in rows), default=0.0)},
               cfg.config_hash)
    return PASS


def run_verify_expansions(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    taus = np.geomspace(cfg["expansions.tau_min"], cfg["expansions.tau_max"],
                        cfg["expansions.n_samples"])
    rows = residual_sweep(model, cfg["expansions.base_point"],
                          cfg["expansions.tangent_seed"], taus)
    report = fit_sweep(rows, tolerance=cfg["expansions.slope_tolerance"])
    write_csv(out / "residual_sweep.csv",
              ["tau", "res_i", "res_ii", "res_iii", "res_iv", "res_interp"],
              [[r.tau, r.res_i, r.res_ii, r.res_iii, r.res_iv, r.res_interp] for r in rows],
              cfg.config_hash)
    ok = all(v["pass"] for v in report.values())
    write_json(out / "fit_report.json", {"fits": list(report.values()), "pass": ok},
               cfg.config_hash)
    return PASS if ok else FAIL


def _geodesic_record(cfg, model):
    x, t = _seed_state(model, cfg, "geodesic.seed_point", "geodesic.seed_direction")
    return find_closed_geodesic(model, PhasePoint(x, t), tol=cfg["geodesic.tol"])


def run_find_geodesic(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    rec = _geodesic_record(cfg, model)
    write_json(out / "closed_geodesic.json", rec.to_json_dict(), cfg.config_hash)
    return PASS if rec.closure_defect < 1e-9 else FAIL


def run_floquet(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    rec = _geodesic_record(cfg, model)
    payload = {"period": rec.period, "closure_defect": rec.closure_defect}
    try:
        fl = classify_floquet(model, rec)
        payload.update({
            "degenerate": False,
            "lambda": fl["lambda"],
            "margin": fl["margin"],
            "pairing_defect": fl["pairing_defect"],
            "multipliers": [complex(m).real for m in fl["multipliers"]],
        })
        ok = fl["hyperbolic"] and fl["pairing_defect"] < 1e-6
    except DegenerateSpectrum as exc:
        payload.update({"degenerate": True, "detail": str(exc)})
        ok = True
    write_json(out / "floquet.json", payload, cfg.config_hash)
    return PASS if ok else FAIL


def run_find_homoclinic(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    rec = _geodesic_record(cfg, model)
    window = cfg.get("homoclinic.window", [0.0, -1.0])
    win = (window[0], None if window[1] < 0 else window[1])
    try:
        hom = find_homoclinic(model, rec, window=win, n_scan=cfg["homoclinic.n_scan"],
                              delta=cfg["homoclinic.delta"], tol=cfg["homoclinic.tol"],
                              doubled_tol=cfg["homoclinic.doubled_tol"])
    except DoubledSeparatrix as exc:
        write_json(out / "homoclinic.json",
                   {"doubled_separatrix": True, "detail": str(exc)}, cfg.config_hash)
        return PASS
    payload = hom.to_json_dict()
    payload["doubled_separatrix"] = False
    write_json(out / "homoclinic.json", payload, cfg.config_hash)
    return PASS if hom.transversality_angle > 1e-3 else FAIL


def run_scattering(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    rec = _geodesic_record(cfg, model)
    tau_star, _ = snap_tau_star(cfg["scattering.tau_star"])
    hom = _trace_homoclinic(model, rec, 1.702, cfg["homoclinic.delta"],
                            cfg["homoclinic.tol"])
    rows = []
    deltas = []
    for phi in np.linspace(0, 1, cfg["scattering.n_phases"], endpoint=False):
        point = CylinderPoint(phi, cfg["scattering.y"])
        res = scattering_map(model, rec, hom, point, tau_star,
                             method=cfg.get("scattering.method", "billiard"))
        rows.append([phi, point.y, res.point_out.phi, res.point_out.y, res.delta,
                     res.tail_error])
        deltas.append(res.delta)
    write_csv(out / "scattering_sweep.csv",
              ["phi", "y", "phi_out", "y_out", "delta", "tail_err"], rows,
              cfg.config_hash)
    ds = np.array(deltas)
    ds = (ds - ds.mean() + 0.5) % 1.0 - 0.5 + ds.mean()
    write_json(out / "scattering_summary.json",
               {"delta_mean": float(ds.mean() % 1.0),
                "delta_spread": float(ds.max() - ds.min()),
                "tau_star": tau_star}, cfg.config_hash)
    return PASS


def melnikov_comparison(base, rec, hom, bump, point, tau_star, d_eps,
                        n_loops=4, placement_shift=-5):
    """Closed-form vs Richardson-FD scattering derivative at one point."""
    tau_star, _ = snap_tau_star(tau_star)
    density = symplectic_density(base, rec, tau_star, point)
    transits = bump_transits(base, rec, hom, bump, point, tau_star,
                             domain_shift=placement_shift)
    cf = scattering_derivative_closed_form(base, rec, hom, bump, point, tau_star,
                                           density=density, transits=transits)

    def family(eps):
        return with_eps_or_build(base, bump, eps)

    fd = scattering_derivative_fd(family, rec, hom, point, tau_star,
                                  d_eps=d_eps, density=density, n_loops=n_loops,
                                  placement_shift=placement_shift)
    return cf, fd, _rel_discrepancy(cf, fd)


def run_melnikov(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    bumps = cfg.bumps()
    if not bumps:
        raise ConfigInvalid("key 'surface.bumps' must list one bump for melnikov")
    bump = bumps[0]
    base = model.base if hasattr(model, "base") else model
    rec = _geodesic_record(cfg, base)
    check_bump_support(base, rec, bump)
    hom = _trace_homoclinic(base, rec, 1.702, cfg["homoclinic.delta"], cfg["homoclinic.tol"])
    tau_star, m = snap_tau_star(cfg["melnikov.tau_star"])
    point = CylinderPoint(0.35, cfg.get("scattering.y", 1.0))
    n_loops = 4 if m <= 24 else 5
    cf, fd, ratio = melnikov_comparison(base, rec, hom, bump, point, tau_star,
                                        cfg["melnikov.d_eps"], n_loops=n_loops)
    write_json(out / "melnikov.json", {
        "point": {"phi": point.phi, "y": point.y},
        "closed_form": {"d_phi": cf.d_phi, "d_y": cf.d_y},
        "finite_diff": {"d_phi": fd.d_phi, "d_y": fd.d_y},
        "ratio": ratio,
        "density": cf.density,
        "tau_star": tau_star,
    }, cfg.config_hash)
    return PASS if ratio < 0.3 else FAIL


def with_eps_or_build(base, bump, eps):
    from .surfaces import PerturbedSurface

    pair = (eps, 0.0) if bump.channel == 1 else (0.0, eps)
    return PerturbedSurface(base, (bump,), pair)


def _rel_discrepancy(cf, fd):
    num = np.hypot(cf.d_phi - fd.d_phi, cf.d_y - fd.d_y)
    den = np.hypot(fd.d_phi, fd.d_y)
    return float(num / max(den, 1e-30))


def run_diffuse_pseudo(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    base = model.base if hasattr(model, "base") else model
    rec = _geodesic_record(cfg, base)
    hom = _trace_homoclinic(base, rec, 1.702, cfg["homoclinic.delta"], cfg["homoclinic.tol"])
    tau1, _ = snap_tau_star(cfg["diffusion.tau_star"])
    shift = cfg["diffusion.injected_shift"]
    measured = shift if shift != 0.0 else None
    ifs = build_ifs(base, rec, [hom], tau1, cfg["diffusion.n_cylinders"],
                    bumps=cfg.bumps(),
                    eps=(cfg.get("surface.eps1", 0.0), cfg.get("surface.eps2", 0.0)),
                    measured_y_shift=measured)
    interp_err = validate_ifs_interpolation(ifs, rng=cfg["run.seed"])
    po = pseudo_orbit_search(ifs, CylinderPoint(0.0, 0.6), cfg["diffusion.target_y"],
                             budget=cfg["diffusion.budget"])
    write_csv(out / "pseudo_orbit.csv", ["step", "move", "phi", "y", "cyl_index"],
              [[r["step"], r["move"], r["phi"], r["y"], r["cyl_index"]]
               for r in po.to_rows()], cfg.config_hash)
    write_json(out / "pseudo_summary.json", {
        "stuck": po.stuck, "reached_y": po.reached_y,
        "reached_cylinder": po.reached_cylinder, "rounds": po.rounds,
        "interp_error": interp_err,
    }, cfg.config_hash)
    expect_stuck = cfg.get("diffusion.mode", "direct") == "expect-stuck"
    if expect_stuck:
        return PASS if po.stuck else FAIL
    return PASS if not po.stuck else FAIL


def run_diffuse_direct(cfg: ExperimentConfig, out: Path):
    model = cfg.surface()
    base = model.base if hasattr(model, "base") else model
    rec = _geodesic_record(cfg, base)
    hom = _trace_homoclinic(base, rec, 1.702, cfg["homoclinic.delta"], cfg["homoclinic.tol"])
    tau_star, _ = snap_tau_star(cfg["diffusion.tau_star"])
    X, U = channel_seeds(model, rec, hom, tau_star, cfg["diffusion.n_seeds"],
                         cfg["run.seed"])
    report = direct_diffusion_experiment(model, rec, X, U, tau_star,
                                         cfg["diffusion.n_bounces"],
                                         osc_delta=cfg["diffusion.osc_delta"])
    write_json(out / "drift_report.json", report.to_json_dict(), cfg.config_hash)
    climb_target = cfg["diffusion.climb_target"]
    if climb_target > 0:
        return PASS if report.best_climb >= climb_target else FAIL
    # negative-control mode: fail when drift exceeds the bound
    return PASS if report.negative_drift_bound < 1e-3 else FAIL


def build_condition_bumps(model, rec, hom, tau_star, margin=1.0, width=0.02,
                          q_centers=(0.0, 0.3, -0.3, 0.55), flip_tilt=False):
    """The eight-bump two-channel family with constructed tilt constants.

    Channel 1 carries maps 1..4 (families up, up, down, down), channel 2
    mirrors them; amplitudes are scaled in a second pass so |dPsi/d eps|
    clears the floor on each bump's arc.
    """
    from .diffusion import check_lipschitz_conditions, tilt_constant
    from .surfaces import BumpSpec

    specs = []
    for ch in (1, 2):
        for j, q_c in enumerate(q_centers):
            family = "up" if j < 2 else "down"
            c2 = tilt_constant(model, rec, hom, q_c, width, family=family,
                               margin=margin)
            if flip_tilt:
                c2 = -c2
            x, w = hom.state_at(q_c)
            bump = BumpSpec(center=x, width=width, amplitude=1.0, tilt=c2 * w,
                            channel=ch)
            specs.append((bump, family, DEFAULT_ARCS[j]))
    # amplitude pass: scale each bump so the arc-sampled |dPsi/d eps| clears
    # the floor with headroom (the construction allows amplitudes ~1/tau*)
    rep0 = check_lipschitz_conditions(model, rec, hom, specs, tau_star)
    from .surfaces import BumpSpec as _B

    scaled = []
    for (bump, family, arc), entry in zip(specs, rep0.entries):
        floor = entry["amplitude_floor"]
        have = entry["amplitude_margin_min"] + floor  # = min |dPsi/d eps|
        amp = max(1.0, 1.5 * floor / max(have, 1e-12))
        scaled.append((_B(center=bump.center, width=bump.width,
                          amplitude=amp, tilt=bump.tilt, channel=bump.channel),
                       family, arc))
    return scaled


def run_check_conditions(cfg: ExperimentConfig, out: Path):
    from .diffusion import check_lipschitz_conditions

    model = cfg.surface()
    base = model.base if hasattr(model, "base") else model
    rec = _geodesic_record(cfg, base)
    hom = _trace_homoclinic(base, rec, 1.702, cfg["homoclinic.delta"], cfg["homoclinic.tol"])
    tau_star, _ = snap_tau_star(cfg["conditions.tau_star"])
    specs = build_condition_bumps(base, rec, hom, tau_star,
                                  margin=cfg["conditions.margin"])
    rep = check_lipschitz_conditions(base, rec, hom, specs, tau_star)
    flipped = build_condition_bumps(base, rec, hom, tau_star,
                                    margin=cfg["conditions.margin"], flip_tilt=True)
    rep_flip = check_lipschitz_conditions(base, rec, hom, flipped, tau_star)
    flip_fails = all(e["cone_margin_min"] < 0 for e in rep_flip.entries)
    payload = rep.to_json_dict()
    payload["tilt_flip_inverts"] = flip_fails
    write_json(out / "conditions.json", payload, cfg.config_hash)
    return PASS if (rep.all_pass and flip_fails) else FAIL


RUNNERS = {
    "verify-geometry": run_verify_geometry,
    "billiard-orbit": run_billiard_orbit,
    "verify-expansions": run_verify_expansions,
    "find-geodesic": run_find_geodesic,
    "floquet": run_floquet,
    "find-homoclinic": run_find_homoclinic,
    "scattering": run_scattering,
    "melnikov": run_melnikov,
    "diffuse-pseudo": run_diffuse_pseudo,
    "diffuse-direct": run_diffuse_direct,
    "check-conditions": run_check_conditions,
}

_CATALOG = {
    "verify-geometry": ("surface derivative consistency, convexity, cubic-form pairing",
                        ["surface.kind"]),
    "billiard-orbit": ("iterate the billiard map and log per-bounce diagnostics",
                       ["billiard.n_bounces", "billiard.sin_theta"]),
    "verify-expansions": ("near-boundary expansion residual orders (log-log slopes)",
                          ["expansions.tau_min", "expansions.tau_max"]),
    "find-geodesic": ("closed geodesic by Poincare-Newton shooting",
                      ["geodesic.seed_point", "geodesic.seed_direction"]),
    "floquet": ("transverse Floquet multipliers of a closed geodesic",
                ["geodesic.seed_point"]),
    "find-homoclinic": ("transverse homoclinic search / doubled-separatrix control",
                        ["homoclinic.delta", "homoclinic.n_scan"]),
    "scattering": ("scattering-map sweep over cylinder phases",
                   ["scattering.tau_star", "scattering.n_phases"]),
    "melnikov": ("closed-form vs finite-difference scattering derivatives",
                 ["melnikov.tau_star", "melnikov.d_eps", "surface.bumps"]),
    "diffuse-pseudo": ("pseudo-orbit frontier search on the tabulated IFS",
                       ["diffusion.n_cylinders", "diffusion.target_y"]),
    "diffuse-direct": ("direct billiard ensemble drift in the homoclinic channel",
                       ["diffusion.n_seeds", "diffusion.n_bounces"]),
    "check-conditions": ("inequality margins for the two-parameter bump families",
                         ["conditions.tau_star", "surface.bumps"]),
}


def list_experiments():
    lines = []
    for kind in EXPERIMENT_KINDS:
        desc, keys = _CATALOG[kind]
        lines.append(f"{kind:<18} {desc}")
        lines.append(f"{'':<18} keys: {', '.join(keys)}")
    return "\n".join(lines)


def run(kind, config_path, out_dir=None, seed=None, workers=None):
    """Execute one experiment; returns the process exit status."""
    overrides = {}
    if seed is not None:
        overrides["run.seed"] = seed
    if workers is not None:
        overrides["run.workers"] = workers
    cfg = load_config(config_path, kind, overrides=overrides)
    out = Path(out_dir if out_dir is not None else cfg.get("run.out_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    status = RUNNERS[kind](cfg, out)
    manifest = {
        "experiment": kind,
        "config_hash": cfg.config_hash,
        "version": __version__,
        "wall_time_s": round(time.time() - t0, 3),
        "status": status,
        "seed": cfg["run.seed"],
    }
    write_json(out / "run_manifest.json", manifest, cfg.config_hash)
    return status
