import numpy as np
import pytest
import scipy.sparse.linalg as spla

import pointflow as pf
from pointflow import fem
from pointflow.errors import PointLocationError, SingularSystemError

from helpers import ManufacturedStokes, observed_orders, quad_error_norms


def test_space_dof_counts(mesh1, space1):
    assert space1.n_u == 2 * (mesh1.n_nodes + len(mesh1.edges))
    assert space1.n_p == mesh1.n_nodes


def test_boundary_dofs_lie_on_boundary(space1):
    pts = space1.dof_points
    scalar_ids = space1.boundary_velocity_dofs[::2] // 2
    for p in pts[scalar_ids]:
        assert min(p.min(), (1 - p).min()) <= 1e-14
    interior_scalar = space1.interior_velocity_dofs[::2] // 2
    assert np.all(pts[interior_scalar].min(axis=1) > 0)
    assert np.all(pts[interior_scalar].max(axis=1) < 1)


def test_stokes_constant_field_in_kernel(space1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    u = space1.interpolate_velocity(
        lambda x: np.column_stack([np.ones(len(x)), 2 * np.ones(len(x))])
    )
    r = (sys_.A @ u)[space1.interior_velocity_dofs]
    assert np.abs(r).max() < 1e-12


def test_stokes_energy_matches_analytic(space1):
    # u = (x2^2, 0): nu int |grad u|^2 = nu * 4/3
    nu = 2.5
    sys_ = fem.assemble_stokes(space1, nu=nu)
    u = space1.interpolate_velocity(
        lambda x: np.column_stack([x[:, 1] ** 2, np.zeros(len(x))])
    )
    assert u @ (sys_.A @ u) == pytest.approx(nu * 4.0 / 3.0, rel=1e-10)


def test_divergence_annihilates_divergence_free(space1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    u = space1.interpolate_velocity(
        lambda x: np.column_stack([x[:, 1], np.zeros(len(x))])
    )
    assert np.abs(sys_.B @ u).max() < 1e-12


def test_stokes_requires_positive_viscosity(space1):
    with pytest.raises(ValueError):
        fem.assemble_stokes(space1, nu=0.0)


def test_stokes_symmetry_and_mass_spd(space1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    asym = sys_.A - sys_.A.T
    scale = np.abs(sys_.A.data).max()
    assert (np.abs(asym.data).max() if asym.nnz else 0.0) <= 1e-12 * scale
    lam_min = spla.eigsh(sys_.M, k=1, which="SA", return_eigenvectors=False)[0]
    assert lam_min > 0


def test_assembly_bitwise_reproducible(space1):
    a1 = fem.assemble_stokes(space1, nu=1.0)
    a2 = fem.assemble_stokes(space1, nu=1.0)
    assert np.array_equal(a1.A.data, a2.A.data)
    assert np.array_equal(a1.A.indices, a2.A.indices)
    assert np.array_equal(a1.B.data, a2.B.data)
    assert np.array_equal(a1.m, a2.m)
    c1 = fem.assemble_convection(space1, np.linspace(0, 1, space1.n_u))
    c2 = fem.assemble_convection(space1, np.linspace(0, 1, space1.n_u))
    assert np.array_equal(c1[0].data, c2[0].data)
    assert np.array_equal(c1[1].data, c2[1].data)


# ------------------------------------------------------------------ #
# convection forms                                                    #
# ------------------------------------------------------------------ #
def test_convection_zero_field(space1):
    C1, C2 = fem.assemble_convection(space1, np.zeros(space1.n_u))
    T1, T2 = fem.assemble_convection_tensor(space1, np.zeros(space1.n_u))
    for mat in (C1, C2, T1, T2):
        assert mat.nnz == 0 or np.abs(mat.data).max() == 0.0


def _direct_quadrature_c1(space, y, theta, w, degree=6):
    """Independent quadrature of int (y . grad theta) . w on a finer rule."""
    qd = space.quadrature(degree, subdivide=1)
    yv = space.velocity_values_at(y, qd)
    tg = space.velocity_gradients_at(theta, qd)
    wv = space.velocity_values_at(w, qd)
    adv = np.einsum("tqd,tqcd->tqc", yv, tg)
    return float(np.einsum("q,tqc,tqc,t->", qd.weights, adv, wv, space.areas))


def test_convection_assembly_matches_direct_quadrature(space1):
    rng = np.random.default_rng(5)
    y = rng.normal(size=space1.n_u)
    theta = rng.normal(size=space1.n_u)
    w = rng.normal(size=space1.n_u)
    C1, _ = fem.assemble_convection(space1, y)
    assembled = float(w @ (C1 @ theta))
    direct = _direct_quadrature_c1(space1, y, theta, w)
    assert assembled == pytest.approx(direct, rel=1e-10)


def test_convection_skew_identity_for_divfree_velocity(space1, src1):
    """Integration-by-parts identity: for y with zero boundary trace,
    theta' C1(y) theta = -1/2 int (div y) |theta|^2 exactly (both sides by
    quadrature). For a discretely divergence-free y the right side is small
    only weakly; the identity itself is exact."""
    # y: a discrete Stokes velocity (discretely divergence-free, zero trace)
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    F = fem.assemble_dirac_load(space1, src1, [(1.0, 0.5)])
    y = fem.solve_saddle(sys_, F).velocity
    rng = np.random.default_rng(6)
    theta = rng.normal(size=space1.n_u)
    C1, _ = fem.assemble_convection(space1, y)
    lhs = float(theta @ (C1 @ theta))
    qd = space1.quadrature(6)
    div = np.einsum("tqcc->tq", space1.velocity_gradients_at(y, qd))
    tv = space1.velocity_values_at(theta, qd)
    rhs = -0.5 * float(
        np.einsum("q,tq,tqc,tqc,t->", qd.weights, div, tv, tv, space1.areas)
    )
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_convection_c2_matches_direct_quadrature(space1):
    rng = np.random.default_rng(7)
    y = rng.normal(size=space1.n_u)
    theta = rng.normal(size=space1.n_u)
    w = rng.normal(size=space1.n_u)
    _, C2 = fem.assemble_convection(space1, y)
    assembled = float(w @ (C2 @ theta))
    qd = space1.quadrature(8, subdivide=1)
    yg = space1.velocity_gradients_at(y, qd)
    tv = space1.velocity_values_at(theta, qd)
    wv = space1.velocity_values_at(w, qd)
    stretch = np.einsum("tqcd,tqd->tqc", yg, tv)
    direct = float(np.einsum("q,tqc,tqc,t->", qd.weights, stretch, wv, space1.areas))
    assert assembled == pytest.approx(direct, rel=1e-9)


def test_tensor_and_convective_forms_ibp_relation(space1):
    """-T_b(y) theta tested with w equals C1(y) plus the div-y correction."""
    rng = np.random.default_rng(8)
    y = rng.normal(size=space1.n_u)
    theta = rng.normal(size=space1.n_u)
    w0 = np.zeros(space1.n_u)
    w0[space1.interior_velocity_dofs] = rng.normal(
        size=len(space1.interior_velocity_dofs)
    )
    C1, _ = fem.assemble_convection(space1, y)
    T1, T2 = fem.assemble_convection_tensor(space1, y)
    lhs = -float(w0 @ (T2 @ theta))  # -int theta (x) y : grad w
    qd = space1.quadrature(6)
    div_y = np.einsum("tqcc->tq", space1.velocity_gradients_at(y, qd))
    tv = space1.velocity_values_at(theta, qd)
    wv = space1.velocity_values_at(w0, qd)
    corr = float(np.einsum("q,tq,tqc,tqc,t->", qd.weights, div_y, tv, wv, space1.areas))
    rhs = float(w0 @ (C1 @ theta)) + corr
    assert lhs == pytest.approx(rhs, rel=1e-9)


# ------------------------------------------------------------------ #
# point loads                                                         #
# ------------------------------------------------------------------ #
def test_dirac_load_zero_amplitude(space1, src1):
    F = fem.assemble_dirac_load(space1, src1, [(0.0, 0.0)])
    assert not np.any(F)


def test_dirac_load_single_entry(space1, src1, mesh1):
    F = fem.assemble_dirac_load(space1, src1, [(1.0, 0.0)])
    node = mesh1.node_at((0.5, 0.5), 1e-12)
    nz = np.nonzero(F)[0]
    assert list(nz) == [2 * node]
    assert F[2 * node] == 1.0


def test_dirac_load_pairing(space2, src2):
    rng = np.random.default_rng(9)
    U = rng.normal(size=(2, 2))
    F = fem.assemble_dirac_load(space2, src2, U)
    v = rng.normal(size=space2.n_u)
    field = fem.VelocityPressureField(space2, v, np.zeros(space2.n_p))
    expected = sum(
        float(U[i] @ fem.evaluate_velocity_at(field, t))
        for i, t in enumerate(src2.points)
    )
    assert F @ v == pytest.approx(expected, abs=1e-14 * np.abs(v).max())


def test_dirac_load_requires_node(space1):
    with pytest.raises(PointLocationError):
        fem.assemble_dirac_load(space1, [(0.123456, 0.654321)], [(1.0, 0.0)])


# ------------------------------------------------------------------ #
# saddle solves                                                       #
# ------------------------------------------------------------------ #
def test_saddle_zero_rhs(space1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    fld = fem.solve_saddle(sys_, np.zeros(space1.n_u))
    assert np.abs(fld.velocity).max() == 0.0
    assert np.abs(fld.pressure).max() == 0.0


def test_saddle_self_adjointness(space1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    op = fem.factorize_saddle(sys_)
    rng = np.random.default_rng(10)
    f = rng.normal(size=space1.n_u)
    g = rng.normal(size=space1.n_u)
    uf, _, _ = op.solve(f)
    ug, _, _ = op.solve(g)
    assert g @ uf == pytest.approx(f @ ug, rel=1e-10)


def test_saddle_pressure_zero_mean(space1, src1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    F = fem.assemble_dirac_load(space1, src1, [(1.0, -0.4)])
    fld = fem.solve_saddle(sys_, F)
    assert abs(fem.pressure_mean(sys_, fld.pressure)) < 1e-12
    assert np.abs(fld.velocity[space1.boundary_velocity_dofs]).max() == 0.0


def test_manufactured_stokes_convergence():
    mms = ManufacturedStokes(nu=1.0)
    h1_errors, interp_residuals = [], []
    for n in (8, 16, 32):
        mesh = pf.build_unit_square_mesh(n)
        space = fem.TaylorHoodSpace(mesh)
        sys_ = fem.assemble_stokes(space, nu=1.0)
        F = fem.assemble_body_load(space, mms.body_force)
        fld = fem.solve_saddle(sys_, F)
        _, h1 = quad_error_norms(
            space, fld.velocity, mms.velocity, mms.velocity_gradient
        )
        h1_errors.append(h1)
        uI = space.interpolate_velocity(mms.velocity)
        pI = space.interpolate_pressure(lambda x: x[:, 0] - 0.5)
        res = (sys_.A @ uI - sys_.B.T @ pI - F)[space.interior_velocity_dofs]
        interp_residuals.append(float(np.linalg.norm(res)))
    orders = observed_orders(h1_errors)
    assert np.all(orders >= 1.8), orders
    # Galerkin-consistency: interpolant residual decreases under refinement
    assert interp_residuals[1] < interp_residuals[0] / 1.5
    assert interp_residuals[2] < interp_residuals[1] / 1.5


def test_saddle_singular_system_raises(space1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    # destroy invertibility: zero viscous block
    broken = fem.SaddleSystem(
        space=space1, nu=1.0, A=0.0 * sys_.A, B=sys_.B, M=sys_.M, m=sys_.m
    )
    with pytest.raises(SingularSystemError):
        op = fem.factorize_saddle(broken)
        op.solve(np.ones(space1.n_u))


def test_inf_sup_stable_across_refinement():
    """Generalized smallest singular value of the divergence block on the
    zero-mean pressure space, scaled by the H1/ L2 mesh norms."""
    betas = []
    for n in (8, 16, 32):
        mesh = pf.build_unit_square_mesh(n)
        space = fem.TaylorHoodSpace(mesh)
        sys_ = fem.assemble_stokes(space, nu=1.0)
        iu = space.interior_velocity_dofs
        A = sys_.A[iu][:, iu].tocsc()
        B = sys_.B.tocsc()[:, iu]
        lu = spla.splu(A)
        S = B @ lu.solve(B.toarray().T)
        qd = space.quadrature(4)
        mp = np.zeros((space.n_p, space.n_p))
        pe = np.einsum("q,qa,qb,t->tab", qd.weights, qd.p1, qd.p1, space.areas)
        for t, tri in enumerate(mesh.triangles):
            mp[np.ix_(tri, tri)] += pe[t]
        import scipy.linalg as sla

        vals = sla.eigh(0.5 * (S + S.T), mp, eigvals_only=True)
        betas.append(np.sqrt(max(vals[1], 0.0)))  # vals[0] ~ 0: constant pressure
    assert all(b > 0.05 for b in betas), betas
    assert all(b2 / b1 >= 0.5 for b1, b2 in zip(betas, betas[1:])), betas


# ------------------------------------------------------------------ #
# evaluation and I/O                                                  #
# ------------------------------------------------------------------ #
def test_velocity_evaluation_reproduces_polynomials(space1):
    lin = space1.interpolate_velocity(lambda x: x.copy())
    f_lin = fem.VelocityPressureField(space1, lin, np.zeros(space1.n_p))
    assert fem.evaluate_velocity_at(f_lin, (0.3, 0.7)) == pytest.approx(
        [0.3, 0.7], abs=1e-14
    )
    quad = space1.interpolate_velocity(
        lambda x: np.column_stack([x[:, 0] ** 2, np.zeros(len(x))])
    )
    f_quad = fem.VelocityPressureField(space1, quad, np.zeros(space1.n_p))
    assert fem.evaluate_velocity_at(f_quad, (0.5, 0.5)) == pytest.approx(
        [0.25, 0.0], abs=1e-14
    )


def test_velocity_evaluation_at_vertex_is_dof(space1, mesh1):
    rng = np.random.default_rng(11)
    u = rng.normal(size=space1.n_u)
    field = fem.VelocityPressureField(space1, u, np.zeros(space1.n_p))
    node = 17
    val = fem.evaluate_velocity_at(field, mesh1.nodes[node])
    assert val == pytest.approx([u[2 * node], u[2 * node + 1]], abs=1e-13)


def test_field_vtk_and_npz_roundtrip(tmp_path, space1, src1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    F = fem.assemble_dirac_load(space1, src1, [(1.0, 0.0)])
    fld = fem.solve_saddle(sys_, F)
    vtk = tmp_path / "f.vtk"
    fem.write_field_vtk(fld, vtk)
    text = vtk.read_text()
    assert "VECTORS velocity double" in text
    assert "SCALARS pressure double 1" in text
    npz = tmp_path / "f.npz"
    fem.save_field_npz(fld, npz)
    back = fem.load_field_npz(space1, npz)
    assert np.array_equal(back.velocity, fld.velocity)
    assert np.array_equal(back.pressure, fld.pressure)


def test_npz_rejects_other_mesh(tmp_path, space1, space2, src1):
    sys_ = fem.assemble_stokes(space1, nu=1.0)
    fld = fem.solve_saddle(sys_, fem.assemble_dirac_load(space1, src1, [(1.0, 0.0)]))
    npz = tmp_path / "f.npz"
    fem.save_field_npz(fld, npz)
    with pytest.raises(ValueError):
        fem.load_field_npz(space2, npz)
