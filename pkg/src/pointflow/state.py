"""Nonlinear state solves with point-force loads, linearized and second-order
sensitivity solves, and a discrete regularity indicator.

The momentum nonlinearity is discretized in the weak divergence (tensor)
form, matching the weak formulation the optimality system is derived from;
the gap to the convective form is monitored, not enforced (see
``fem.convection_ibp_gap``). As a consequence the linearized operator is the
exact Jacobian of the discrete state map, the adjoint is its exact transpose,
and second-order solves are exact second derivatives, which is what the
finite-difference consistency checks require.

Newton with a Picard warm start and two-step load continuation is used; the
framework assumes neither smallness nor uniqueness, so a failed solve is
reported as nonconverged rather than silently damped into something else.
"""

from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import SingularSystemError


@dataclass(frozen=True)
class StateSolveOptions:
    picard_iters: int = 3
    newton_tol: float = 1e-10
    newton_max_iters: int = 25
    continuation_steps: int = 2
    max_damping_halvings: int = 10

    def __post_init__(self):
        if self.newton_tol <= 0.0:
            raise ValueError("newton_tol must be positive")
        for name in ("picard_iters", "newton_max_iters", "continuation_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class StateSolution:
    """Converged (or best-effort) discrete state with its factorized linearization.

    ``operator`` is the LU factorization of the Jacobian at the returned
    iterate; linearized, second-order and adjoint solves all reuse it.
    ``regularity_indicator`` is a reciprocal condition estimate of that
    matrix, a discrete proxy for invertibility of the linearized operator --
    reported as evidence, never asserted as a theorem. It and the
    integration-by-parts defect are computed on first access.
    """

    field: fem.VelocityPressureField
    converged: bool
    residual_history: list
    newton_iters: int
    space: object
    system: fem.SaddleSystem
    nu: float
    sources: object
    control: np.ndarray
    load: np.ndarray
    operator: fem.FactorizedSaddle
    _regularity: float = None
    _ibp: float = None

    @property
    def regularity_indicator(self):
        if self._regularity is None:
            self._regularity = fem.equilibrated_rcond(self.operator.K)
        return self._regularity

    @property
    def ibp_defect(self):
        if self._ibp is None:
            self._ibp = fem.convection_ibp_gap(self.space, self.field.velocity)
        return self._ibp


def _tensor_jacobian_blocks(space, u):
    T1, T2 = fem.assemble_convection_tensor(space, u)
    return [(-1.0, T1), (-1.0, T2)]


def _algebraic_residual(system, u, p, lam, load):
    """Residual of the constrained system at (u, p, lam), interior rows only."""
    space = system.space
    r_u = system.A @ u - fem.convection_vector(space, u, "tensor") - system.B.T @ p - load
    r_p = system.B @ u + lam * system.m
    r_g = float(system.m @ p)
    return np.concatenate([r_u[space.interior_velocity_dofs], r_p, [r_g]])


def _newton_loop(system, load, u, p, lam, opts, history, denom):
    """Damped Newton iteration; returns (u, p, lam, converged, op_at_iterate)."""
    space = system.space
    res = _algebraic_residual(system, u, p, lam, load)
    rnorm = float(np.linalg.norm(res))
    history.append(rnorm / denom)
    op = None
    for _ in range(opts.newton_max_iters):
        if rnorm / denom <= opts.newton_tol:
            return u, p, lam, True, op
        op = fem.FactorizedSaddle(system, _tensor_jacobian_blocks(space, u))
        step = op._solve_raw(-res, transpose=False)
        du = np.zeros(space.n_u)
        du[space.interior_velocity_dofs] = step[: op.n_i]
        dp = step[op.n_i : op.n_i + op.n_p]
        dlam = float(step[-1])
        scale = 1.0
        accepted = False
        for _ in range(opts.max_damping_halvings + 1):
            res_new = _algebraic_residual(
                system, u + scale * du, p + scale * dp, lam + scale * dlam, load
            )
            rnorm_new = float(np.linalg.norm(res_new))
            if rnorm_new < rnorm:
                u, p, lam = u + scale * du, p + scale * dp, lam + scale * dlam
                res, rnorm = res_new, rnorm_new
                accepted = True
                break
            scale *= 0.5
        history.append(rnorm / denom)
        if not accepted:
            return u, p, lam, False, op
    return u, p, lam, rnorm / denom <= opts.newton_tol, op


def solve_state(space, nu, sources, U, opts=None, body_force=None, initial=None):
    """Solve the discrete steady momentum/continuity system with point forces.

    ``body_force`` replaces the point-force load with a smooth analytic load
    (used by manufactured-solution studies). ``initial`` warm-starts Newton
    from a previous solution. On nonconvergence the best iterate is returned
    with ``converged=False``; a singular linearization raises
    SingularSystemError.
    """
    opts = opts or StateSolveOptions()
    system = assemble_state_system(space, nu)
    return solve_state_assembled(
        system, sources, U, opts=opts, body_force=body_force, initial=initial
    )


def assemble_state_system(space, nu):
    return fem.assemble_stokes(space, nu)


def solve_state_assembled(system, sources, U, opts=None, body_force=None, initial=None):
    opts = opts or StateSolveOptions()
    space = system.space
    if body_force is not None:
        load = fem.assemble_body_load(space, body_force)
    else:
        load = fem.assemble_dirac_load(space, sources, U)
    denom = max(float(np.linalg.norm(load)), 1e-300) if np.any(load) else 1.0

    if initial is not None:
        fld = initial.field if isinstance(initial, StateSolution) else initial
        u, p = fld.velocity.copy(), fld.pressure.copy()
    else:
        u, p = np.zeros(space.n_u), np.zeros(space.n_p)
    lam = 0.0
    history = []

    # Picard warm start: transport by the previous iterate only.
    for _ in range(opts.picard_iters if initial is None else 0):
        res0 = _algebraic_residual(system, u, p, lam, load)
        if float(np.linalg.norm(res0)) / denom <= opts.newton_tol:
            break
        _, T2 = fem.assemble_convection_tensor(space, u)
        op = fem.FactorizedSaddle(system, [(-1.0, T2)])
        u, p, lam = op.solve(load)

    u, p, lam, converged, op = _newton_loop(system, load, u, p, lam, opts, history, denom)

    if not converged and opts.continuation_steps > 0 and body_force is None:
        u, p, lam = np.zeros(space.n_u), np.zeros(space.n_p), 0.0
        history.append(np.nan)  # marks the continuation restart
        ok = True
        for stage in range(1, opts.continuation_steps + 1):
            frac = stage / opts.continuation_steps
            u, p, lam, ok, op = _newton_loop(
                system, frac * load, u, p, lam, opts, history, denom * frac
            )
            if not ok:
                break
        converged = ok

    if op is None or converged:
        # factorize at the final iterate so downstream solves use the exact Jacobian
        op = fem.FactorizedSaddle(system, _tensor_jacobian_blocks(space, u))

    field = fem.VelocityPressureField(space, u, p, role="state")
    return StateSolution(
        field=field,
        converged=bool(converged),
        residual_history=history,
        newton_iters=max(len(history) - 1, 0),
        space=space,
        system=system,
        nu=system.nu,
        sources=sources,
        control=None if U is None else np.asarray(U, float).reshape(-1, 2),
        load=load,
        operator=op,
    )


def solve_linearized(state, load, role="sensitivity"):
    """Sensitivity solve: the state Jacobian applied inversely to a dual load.

    With a point-force load this is the derivative of the discrete solution
    map in the corresponding control direction.
    """
    load = np.asarray(load, float)
    if load.shape != (state.space.n_u,):
        raise ValueError("load vector has the wrong length")
    try:
        u, p, _ = state.operator.solve(load)
    except SingularSystemError as exc:
        raise SingularSystemError(
            "linearized state operator is singular at this state "
            "(discrete regularity proxy failed)",
            rcond=exc.rcond,
        ) from exc
    return fem.VelocityPressureField(state.space, u, p, role=role)


def solve_second_sensitivity(state, theta1, theta2):
    """Second derivative of the solution map along two sensitivity fields.

    Solves the linearized operator with the symmetrized tensor load built
    from theta1 and theta2; the output is symmetric in its arguments bitwise.
    """
    for th in (theta1, theta2):
        if th.space is not state.space:
            raise ValueError("sensitivity fields must live on the state's space")
    rhs = fem.assemble_pair_tensor_load(state.space, theta1, theta2)
    return solve_linearized(state, rhs, role="second-sensitivity")


def regularity_indicator(state):
    """Reciprocal condition estimate of the factorized linearized saddle matrix.

    Values above ~1e-12 are reported as "regular at the discrete level"; this
    is a heuristic shadow of the continuous regularity assumption.
    """
    return state.regularity_indicator
