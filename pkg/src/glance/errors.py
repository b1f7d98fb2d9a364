"""Exception types shared across the package.

Every failure mode that callers are expected to branch on gets its own
class; plain ValueError/RuntimeError are reserved for programming errors.
"""


class GlanceError(Exception):
    """Base class for all package-specific errors."""


class NotOnSurface(GlanceError):
    """Point fails the |Q(x)| <= on_surface_tol check."""


class DegenerateGradient(GlanceError):
    """The gradient of Q is too small to define a normal direction."""


class NoConvergence(GlanceError):
    """An iterative solver ran out of iterations."""


class ConvexityLost(GlanceError):
    """A sampled tangential Hessian eigenvalue is not strictly positive."""


class GrazingState(GlanceError):
    """1 - |u|^2 below the grazing threshold: treat as a boundary fixed point."""


class BracketFailure(GlanceError):
    """No sign change found for the flight-time root within the search span."""


class StepUnderflow(GlanceError):
    """Adaptive integrator needs a step below the minimum allowed size."""


class InvalidZ(GlanceError):
    """Rescaled coordinates reconstruct a speed outside (0, 1)."""


class FloorDominated(GlanceError):
    """Residuals sit at the rounding floor; no convergence order measurable."""


class DegenerateSpectrum(GlanceError):
    """Transverse Floquet multipliers are on the unit circle (not hyperbolic)."""


class NonTransverseSection(GlanceError):
    """Poincare section is (numerically) tangent to the flow."""


class NoSignChange(GlanceError):
    """Splitting functional has no zero inside the search window."""


class DoubledSeparatrix(GlanceError):
    """Splitting stays below the integrable-case threshold across the window."""


class OutsideTube(GlanceError):
    """State is too far from the closed geodesic for cylinder coordinates."""


class NoTubeEntry(GlanceError):
    """Orbit never entered the tube around the closed geodesic within T_max."""


class TailNotConverging(GlanceError):
    """Asymptotic-phase extrapolation tail fails its consistency check."""


class SupportViolation(GlanceError):
    """Perturbation bump leaks onto the closed geodesic's tube."""


class NoiseDominated(GlanceError):
    """Finite-difference derivative estimates disagree beyond tolerance."""


class DegenerateChart(GlanceError):
    """Cylinder chart vectors are too close to parallel to define a density."""


class GapBetweenCylinders(GlanceError):
    """Consecutive cylinder windows in the schedule fail to overlap."""


class ArcLayoutInvalid(GlanceError):
    """Circle arcs do not satisfy the cover/disjointness layout rules."""


class ConfigInvalid(GlanceError):
    """Experiment configuration is malformed; message names the offending key."""
