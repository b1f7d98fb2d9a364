"""Experiment configuration: TOML parsing, validation, hashing.

Flat dotted-section TOML; unknown keys are rejected and every numeric field
is range-checked.  The full default set ships in data/defaults.toml.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import ConfigInvalid
from .surfaces import BumpSpec, build_surface

EXPERIMENT_KINDS = (
    "verify-geometry",
    "billiard-orbit",
    "verify-expansions",
    "find-geodesic",
    "floquet",
    "find-homoclinic",
    "scattering",
    "melnikov",
    "diffuse-pseudo",
    "diffuse-direct",
    "check-conditions",
)

# key -> (type, lo, hi) ; None bound = unchecked
_NUMERIC = {
    "surface.radius": (float, 1e-6, 1e6),
    "surface.eps1": (float, -10.0, 10.0),
    "surface.eps2": (float, -10.0, 10.0),
    "tolerances.on_surface_tol": (float, 0.0, 1e-2),
    "tolerances.flow_tol": (float, 1e-14, 1e-4),
    "tolerances.record_tol": (float, 1e-14, 1e-4),
    "run.seed": (int, 0, 2**64 - 1),
    "run.workers": (int, 1, 4096),
    "billiard.n_bounces": (int, 1, 10**9),
    "billiard.sin_theta": (float, 1e-12, 1.0),
    "expansions.tau_min": (float, 1e-9, 1.0),
    "expansions.tau_max": (float, 1e-9, 10.0),
    "expansions.n_samples": (int, 5, 10000),
    "expansions.slope_tolerance": (float, 1e-3, 2.0),
    "geodesic.tol": (float, 1e-14, 1e-4),
    "homoclinic.delta": (float, 1e-9, 1e-2),
    "homoclinic.n_scan": (int, 4, 4096),
    "homoclinic.tol": (float, 1e-14, 1e-6),
    "homoclinic.doubled_tol": (float, 0.0, 1.0),
    "scattering.tau_star": (float, 1e-4, 0.5),
    "scattering.n_phases": (int, 2, 4096),
    "scattering.y": (float, 0.05, 20.0),
    "melnikov.tau_star": (float, 1e-4, 0.5),
    "melnikov.d_eps": (float, 1e-9, 1e-2),
    "diffusion.tau_star": (float, 1e-4, 0.5),
    "diffusion.n_seeds": (int, 1, 10**6),
    "diffusion.n_bounces": (int, 1, 10**9),
    "diffusion.n_cylinders": (int, 1, 64),
    "diffusion.target_y": (float, 0.0, 1e6),
    "diffusion.budget": (int, 1, 10**9),
    "diffusion.climb_target": (float, 0.0, 100.0),
    "diffusion.injected_shift": (float, -1.0, 1.0),
    "diffusion.osc_delta": (float, 0.0, 1.0),
    "conditions.tau_star": (float, 1e-4, 0.5),
    "conditions.margin": (float, 0.0, 100.0),
}

_OTHER_KEYS = {
    "surface.kind": str,
    "surface.semi_axes": list,
    "surface.bumps": list,
    "run.out_dir": str,
    "geodesic.seed_point": list,
    "geodesic.seed_direction": list,
    "billiard.start_point": list,
    "billiard.start_direction": list,
    "expansions.base_point": list,
    "expansions.tangent_seed": list,
    "homoclinic.window": list,
    "scattering.method": str,
    "diffusion.mode": str,
    "conditions.tilt_margin": float,
}

_BUMP_KEYS = {"center": list, "width": float, "amplitude": float, "tilt": list,
              "channel": int}


def _flatten(d, prefix=""):
    out = {}
    for key, val in d.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(_flatten(val, prefix=f"{name}."))
        else:
            out[name] = val
    return out


def load_defaults():
    text = resources.files("glance").joinpath("data/defaults.toml").read_text()
    return tomllib.loads(text)


@dataclass
class ExperimentConfig:
    kind: str
    values: dict
    config_hash: str
    raw: dict = field(default_factory=dict, repr=False)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigInvalid(f"missing config key '{key}'")
        return self.values[key]

    def surface(self):
        kind = self.get("surface.kind", "ellipsoid")
        bumps = tuple(
            BumpSpec(center=b["center"], width=b["width"], amplitude=b["amplitude"],
                     tilt=b["tilt"], channel=b.get("channel", 1))
            for b in self.get("surface.bumps", [])
        )
        return build_surface(
            kind,
            semi_axes=tuple(self.get("surface.semi_axes", (1.0, 0.8, 0.6))),
            radius=self.get("surface.radius", 1.0),
            bumps=bumps,
            eps=(self.get("surface.eps1", 0.0), self.get("surface.eps2", 0.0)),
            tol=self.get("tolerances.on_surface_tol"),
        )

    def bumps(self):
        return tuple(
            BumpSpec(center=b["center"], width=b["width"], amplitude=b["amplitude"],
                     tilt=b["tilt"], channel=b.get("channel", 1))
            for b in self.get("surface.bumps", [])
        )


def _validate_flat(flat):
    for key, val in flat.items():
        if key in _NUMERIC:
            typ, lo, hi = _NUMERIC[key]
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigInvalid(f"key '{key}' must be numeric, got {type(val).__name__}")
            if typ is int and not float(val).is_integer():
                raise ConfigInvalid(f"key '{key}' must be an integer")
            if (lo is not None and val < lo) or (hi is not None and val > hi):
                raise ConfigInvalid(f"key '{key}' = {val} outside [{lo}, {hi}]")
        elif key in _OTHER_KEYS:
            if not isinstance(val, _OTHER_KEYS[key]):
                raise ConfigInvalid(
                    f"key '{key}' must be {_OTHER_KEYS[key].__name__}, got {type(val).__name__}"
                )
        elif key.startswith("surface.bumps["):
            continue
        else:
            raise ConfigInvalid(f"unknown config key '{key}'")
    kind = flat.get("surface.kind", "ellipsoid")
    if kind not in ("sphere", "ellipsoid", "perturbed"):
        raise ConfigInvalid(f"key 'surface.kind' must be sphere|ellipsoid|perturbed, got '{kind}'")
    for bump in flat.get("surface.bumps", []) or []:
        if not isinstance(bump, dict):
            raise ConfigInvalid("key 'surface.bumps' entries must be tables")
        for bk, bv in bump.items():
            if bk not in _BUMP_KEYS:
                raise ConfigInvalid(f"unknown config key 'surface.bumps.{bk}'")


def config_hash_of(values):
    canon = json.dumps(values, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path, kind, overrides=None):
    """Parse, merge with defaults, validate, and hash a config file."""
    if kind not in EXPERIMENT_KINDS:
        raise ConfigInvalid(f"unknown experiment kind '{kind}'")
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"config parse error: {exc}")
    flat = _flatten(user)
    if overrides:
        flat.update(overrides)
    _validate_flat(flat)
    defaults = _flatten(load_defaults())
    merged = dict(defaults)
    merged.update(flat)
    merged["experiment.kind"] = kind
    return ExperimentConfig(kind=kind, values=merged,
                            config_hash=config_hash_of(merged), raw=user)


def config_from_dict(kind, values):
    """In-memory config (used by tests); same validation path."""
    flat = _flatten(values)
    _validate_flat(flat)
    defaults = _flatten(load_defaults())
    merged = dict(defaults)
    merged.update(flat)
    merged["experiment.kind"] = kind
    return ExperimentConfig(kind=kind, values=merged,
                            config_hash=config_hash_of(merged), raw=values)
