"""Adaptive embedded Runge-Kutta (Dormand-Prince 5(4)) on flat arrays.

Deterministic controller, optional per-accepted-step postprocessing hook
(used for projection back onto the surface / tangent bundle).
"""

from __future__ import annotations

import numpy as np

from .errors import StepUnderflow

# Dormand-Prince coefficients
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def integrate(field, y0, t_span, tol, postprocess=None, step_callback=None, max_steps=2_000_000):
    """Integrate y' = field(t, y) from t_span[0] to t_span[1].

    tol is used for both relative and absolute error control.  postprocess
    (if given) maps an accepted state to a cleaned state.  step_callback
    (t_old, y_old, t_new, y_new) fires after each accepted step; it may
    return False to stop early (the integrator then returns the current
    state).
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    y = np.array(y0, dtype=float)
    if t1 == t0:
        return t0, y
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    h = direction * min(0.1 * span, 1e-2 * span + 1e-6)
    k = [None] * 7
    k[0] = field(t, y)
    for _ in range(max_steps):
        if direction * (t + h - t1) > 0:
            h = t1 - t
        for i in range(1, 7):
            yi = y + h * sum(a * k[j] for j, a in enumerate(_A[i]))
            k[i] = field(t + h * sum(_A[i]), yi)
        y5 = y + h * sum(b * k[i] for i, b in enumerate(_B5) if b != 0.0)
        y4 = y + h * sum(b * k[i] for i, b in enumerate(_B4) if b != 0.0)
        scale = tol + tol * np.maximum(np.abs(y), np.abs(y5))
        err = float(np.sqrt(np.mean(((y5 - y4) / scale) ** 2)))
        if err <= 1.0:
            t_old, y_old = t, y
            t = t + h
            y = y5
            if postprocess is not None:
                y = postprocess(y)
            if step_callback is not None:
                if step_callback(t_old, y_old, t, y) is False:
                    return t, y
            if t == t1 or direction * (t - t1) >= 0:
                return t, y
            k[0] = field(t, y)
        factor = 0.9 * (1.0 / err) ** 0.2 if err > 0 else 5.0
        h = h * min(5.0, max(0.2, factor))
        if abs(h) < 1e-14 * max(1.0, abs(t)):
            raise StepUnderflow(f"step size {abs(h):.3e} at t = {t:.6g}")
    raise StepUnderflow("step budget exhausted")
