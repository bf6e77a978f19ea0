"""Optimal control of steady 2D incompressible flow driven by point forces.

Library layout:

- ``geometry``: polygonal domains, triangle meshes, grading toward source points
- ``weights``: distance weights, separation, weighted/unweighted norm quadrature
- ``fem``: Taylor-Hood spaces, assembly, Dirac loads, saddle-point solves
- ``state``: nonlinear state, linearized and second-order sensitivity solves
- ``adjoint``: discrete adjoint and point evaluation of the adjoint velocity
- ``optimizer``: reduced cost/gradient, projected gradient, Hessian, cones, SSC
- ``cli``: batch front end (``pointflow run config.json``)
"""

from .errors import (
    DomainGeometryError,
    PointLocationError,
    SingularSystemError,
    StateNotConvergedError,
)
from .geometry import (
    PolygonDomain,
    TriMesh,
    build_unit_square_mesh,
    grade_toward_points,
    locate_point,
    write_mesh_vtk,
)
from .weights import (
    DiracSourceSet,
    MuckenhouptWeight,
    compute_separation,
    estimate_A2_characteristic,
    eval_weight,
    eval_weight_inverse,
    lp_seminorm,
    weighted_seminorm,
)
from .fem import (
    SaddleSystem,
    TaylorHoodSpace,
    VelocityPressureField,
    assemble_convection,
    assemble_convection_tensor,
    assemble_dirac_load,
    assemble_stokes,
    evaluate_velocity_at,
    solve_saddle,
    write_field_vtk,
)
from .state import (
    StateSolution,
    StateSolveOptions,
    regularity_indicator,
    solve_linearized,
    solve_second_sensitivity,
    solve_state,
)
from .adjoint import AdjointSolution, adjoint_point_values, solve_adjoint
from .optimizer import (
    BoxConstraints,
    ControlProblem,
    OptimizeReport,
    SecondOrderReport,
    assemble_reduced_hessian,
    check_ssc,
    cone_quadratic_minimum,
    critical_cone,
    hessian_quadratic_form,
    kkt_sign_report,
    project_box,
    projected_gradient,
    quadratic_growth_probe,
    reduced_cost,
    reduced_gradient,
    vi_residual,
)

__version__ = "0.1.0"
