"""glance: convex billiard dynamics near the boundary.

Exact billiard maps on implicit strictly convex surfaces, constrained
geodesic flow with variationals, near-boundary rescaled coordinates and
their expansion-order checks, certified closed geodesics and homoclinics,
cylinder scattering maps with first-order perturbation calculus, and
drift experiments (pseudo-orbit search and direct ensembles).
"""

__version__ = "0.1.0"

from .billiards import (  # noqa: F401
    BilliardEnsemble,
    PhasePoint,
    StepDiagnostics,
    billiard_inverse,
    billiard_step,
    flight_time,
    orbit,
    symplectic_defect,
)
from .geodesics import FlowState, flow, flow_with_variationals, geodesic_field  # noqa: F401
from .nearboundary import (  # noqa: F401
    ExpansionResiduals,
    RescaledPoint,
    adiabatic_invariant,
    expansion_residuals,
    fit_order,
    from_rescaled,
    tau_schedule,
    to_rescaled,
    z_field,
    z_flow,
)
from .structures import (  # noqa: F401
    ClosedGeodesicRecord,
    CylinderPoint,
    HomoclinicRecord,
    classify_floquet,
    cylinder_coordinates,
    cylinder_lift,
    find_closed_geodesic,
    find_homoclinic,
)
from .scattering import (  # noqa: F401
    PerturbationFrame,
    ScatteringDerivative,
    ScatteringSample,
    asymptotic_phase,
    perturbation_frame,
    scattering_derivative_closed_form,
    scattering_derivative_fd,
    scattering_map,
    snap_tau_star,
    symplectic_density,
)
from .surfaces import (  # noqa: F401
    BumpSpec,
    Ellipsoid,
    GeometryFrame,
    PerturbedSurface,
    Sphere,
    SurfaceModel,
    build_surface,
    check_convexity,
    frame_at,
    perturbed_surface,
    project_to_surface,
    tangent_project,
)
