import numpy as np
import pytest

import pointflow as pf
from pointflow import adjoint as adj, fem, weights as wt


def _uniform_target(x):
    return np.column_stack([np.full(len(x), 0.3), np.zeros(len(x))])


def test_adjoint_zero_when_target_equals_state(state1):
    a = pf.solve_adjoint(state1, state1.field)
    assert np.abs(a.field.velocity).max() < 1e-14
    assert np.abs(a.field.pressure).max() < 1e-12
    assert np.abs(a.point_values).max() < 1e-14


def test_adjoint_requires_converged_state(space1, src1):
    from pointflow import state as st

    opts = st.StateSolveOptions(picard_iters=0, newton_max_iters=1, continuation_steps=0)
    bad = pf.solve_state(space1, 0.01, src1, [(50.0, 30.0)], opts=opts)
    assert not bad.converged
    with pytest.raises(ValueError):
        pf.solve_adjoint(bad, _uniform_target)


def test_transpose_identity(state1):
    op = state1.operator
    rng = np.random.default_rng(13)
    f = rng.normal(size=state1.space.n_u)
    g = rng.normal(size=state1.space.n_u)
    uf, _, _ = op.solve(f)
    zg, _, _ = op.solve(g, transpose=True)
    assert g @ uf == pytest.approx(f @ zg, rel=1e-10)


def test_adjoint_matrix_is_exact_transpose(state1):
    """The transpose solve satisfies K^T x = b to the residual tolerance, so
    the adjoint matrix is the state Jacobian transpose by construction."""
    op = state1.operator
    rng = np.random.default_rng(14)
    b = rng.normal(size=op.size)
    x = op._solve_raw(b, transpose=True)
    res = b - op.K.T @ x
    assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(b)


def test_duality_identity(state1, src1):
    """Point-value pairing of the adjoint equals the tracking pairing of the
    sensitivity: both sides computed through independent paths."""
    space = state1.space
    a = pf.solve_adjoint(state1, _uniform_target)
    _, g = fem.tracking_functional(space, state1.field.velocity, _uniform_target)
    rng = np.random.default_rng(15)
    for _ in range(5):
        d = rng.normal(size=(1, 2))
        load = fem.assemble_dirac_load(space, src1, d)
        theta = pf.solve_linearized(state1, load)
        lhs = float(np.sum(d * a.point_values))
        rhs = float(g @ theta.velocity)
        assert lhs == pytest.approx(rhs, rel=1e-8)


def test_point_values_match_field_evaluation(state1, src1):
    a = pf.solve_adjoint(state1, _uniform_target)
    assert a.field.role == "adjoint"
    for i, t in enumerate(src1.points):
        assert a.point_values[i] == pytest.approx(
            fem.evaluate_velocity_at(a.field, t), abs=1e-15
        )
    vals = pf.adjoint_point_values(a)
    assert np.array_equal(vals, a.point_values)


def test_point_evaluation_reproduces_linear_field(space1):
    u = space1.interpolate_velocity(
        lambda x: np.column_stack([x[:, 1], -x[:, 0]])
    )
    field = fem.VelocityPressureField(space1, u, np.zeros(space1.n_p), role="adjoint")
    assert fem.evaluate_velocity_at(field, (0.5, 0.5)) == pytest.approx(
        [0.5, -0.5], abs=1e-14
    )


def test_adjoint_point_values_stable_under_refinement(unit_domain, src1):
    increments = []
    previous = None
    for i, n in enumerate((8, 16, 32)):
        mesh = pf.grade_toward_points(
            pf.build_unit_square_mesh(n), src1, levels=3 + i, ratio=0.5
        )
        space = fem.TaylorHoodSpace(mesh)
        sol = pf.solve_state(space, 1.0, src1, [(1.0, 0.5)])
        a = pf.solve_adjoint(sol, _uniform_target)
        if previous is not None:
            increments.append(float(np.linalg.norm(a.point_values - previous)))
        previous = a.point_values
    assert increments[1] < increments[0]


def test_adjoint_weighted_stability_echo(unit_domain, src1):
    """||grad z||_{L2(rho^-1)} / ||y - y_target||_{L2} bounded across refinement."""
    w = pf.MuckenhouptWeight(alpha=1.5, sources=src1)
    ratios = []
    for i, n in enumerate((8, 16, 32)):
        mesh = pf.grade_toward_points(
            pf.build_unit_square_mesh(n), src1, levels=3 + i, ratio=0.5
        )
        space = fem.TaylorHoodSpace(mesh)
        sol = pf.solve_state(space, 1.0, src1, [(1.0, 0.5)])
        a = pf.solve_adjoint(sol, _uniform_target)
        znorm = pf.weighted_seminorm(a.field, w, sign=-1)
        misfit = np.sqrt(2.0 * a.tracking_value)
        ratios.append(znorm / misfit)
    assert max(ratios) <= 2.0 * min(ratios), ratios
