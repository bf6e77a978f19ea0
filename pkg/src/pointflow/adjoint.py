"""Discrete adjoint solves and point evaluation of the adjoint velocity.

The adjoint matrix is the exact transpose of the state Jacobian (same LU
factorization, transpose solve), so gradients computed from the adjoint are
exact derivatives of the discrete reduced cost up to linear-solver roundoff.
Point values of the adjoint velocity are well-defined because the quadratic
velocity space is continuous.
"""

from dataclasses import dataclass

import numpy as np

from . import fem


@dataclass
class AdjointSolution:
    """Adjoint pair (z, r) with the ready-to-use point values z(t)."""

    field: fem.VelocityPressureField
    point_values: np.ndarray  # (l, 2)
    state: object
    tracking_value: float  # 0.5 * || y - y_target ||^2, same quadrature as the rhs


def solve_adjoint(state, y_target):
    """Solve the transposed linearized system driven by the tracking misfit.

    ``y_target`` may be an analytic callback (projected by quadrature on each
    assembly) or a discrete field on the same space.
    """
    if not state.converged:
        raise ValueError("adjoint requires a converged state solution")
    space = state.space
    jtrack, rhs = fem.tracking_functional(space, state.field.velocity, y_target)
    u, p, _ = state.operator.solve(rhs, transpose=True)
    field = fem.VelocityPressureField(space, u, p, role="adjoint")
    pts = state.sources.points if state.sources is not None else np.zeros((0, 2))
    values = np.array([fem.evaluate_velocity_at(field, t) for t in pts])
    return AdjointSolution(
        field=field,
        point_values=values.reshape(-1, 2),
        state=state,
        tracking_value=jtrack,
    )


def adjoint_point_values(adj):
    """Adjoint velocity evaluated at every source point, shape (l, 2)."""
    return adj.point_values.copy()
