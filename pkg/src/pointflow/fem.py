"""Taylor-Hood finite elements on triangle meshes.

Quadratic vector velocity with linear pressure, assembly of the viscous,
mass, divergence and convection forms, point-force loads, and sparse direct
solves of the constrained saddle system. The pressure gauge (zero mean) is
enforced through a single scalar Lagrange multiplier, which keeps the matrix
square and matches the quotient-space setting exactly.

Assembly is element-loop-free (vectorized over elements) and deterministic:
identical meshes and inputs reproduce identical matrices bit for bit.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import reference
from .errors import PointLocationError, SingularSystemError

_RESIDUAL_RTOL = 1e-10


@dataclass(frozen=True)
class QuadData:
    """Per-mesh quadrature bundle: rule, basis tables and physical geometry."""

    degree: int
    bary: np.ndarray  # (nq, 3)
    weights: np.ndarray  # (nq,)
    points: np.ndarray  # (T, nq, 2)
    p2: np.ndarray  # (nq, 6)
    p1: np.ndarray  # (nq, 3)
    grads: np.ndarray  # (T, nq, 6, 2) physical P2 gradients


class TaylorHoodSpace:
    """P2/P1 velocity-pressure space with homogeneous Dirichlet velocity data."""

    def __init__(self, mesh):
        self.mesh = mesh
        n_nodes = mesh.n_nodes
        n_edges = len(mesh.edges)
        self.n_scalar = n_nodes + n_edges
        self.n_u = 2 * self.n_scalar
        self.n_p = n_nodes

        tri = mesh.triangles
        edge_dofs = n_nodes + mesh.triangle_edges  # (T, 3): edges (01, 12, 20)
        self.cell_dofs = np.hstack([tri, edge_dofs]).astype(np.int64)  # (T, 6)

        midpoints = 0.5 * (mesh.nodes[mesh.edges[:, 0]] + mesh.nodes[mesh.edges[:, 1]])
        self.dof_points = np.vstack([mesh.nodes, midpoints])

        scalar_boundary = np.concatenate(
            [mesh.boundary_node_flags, mesh.boundary_edge_flags]
        )
        self.scalar_boundary = scalar_boundary
        vel = np.repeat(scalar_boundary, 2)
        self.boundary_velocity_dofs = np.nonzero(vel)[0]
        self.interior_velocity_dofs = np.nonzero(~vel)[0]

        coords = mesh.nodes[tri]
        self._jac = np.stack(
            [coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]], axis=-1
        )  # (T, 2, 2), columns are the edge vectors
        self.areas = mesh.signed_areas
        self._quad_cache = {}

    # ------------------------------------------------------------------ #
    # evaluation                                                          #
    # ------------------------------------------------------------------ #
    def quadrature(self, degree, subdivide=0):
        key = (degree, subdivide)
        qd = self._quad_cache.get(key)
        if qd is None:
            bary, wts = reference.rule(degree)
            if subdivide:
                bary, wts = reference.refine_rule(bary, wts, subdivide)
            pts = (
                np.einsum("tde,qe->tqd", self._jac, bary[:, 1:])
                + self.mesh._origins[:, None, :]
            )
            grads = np.einsum(
                "qie,ted->tqid", reference.p2_reference_gradients(bary), self.mesh._inv_maps
            )
            qd = QuadData(
                degree=degree,
                bary=bary,
                weights=wts,
                points=pts,
                p2=reference.p2_values(bary),
                p1=reference.p1_values(bary),
                grads=grads,
            )
            self._quad_cache[key] = qd
        return qd

    def velocity_table(self, u):
        """Velocity coefficients as an (n_scalar, 2) table."""
        return np.asarray(u, float).reshape(self.n_scalar, 2)

    def velocity_values_at(self, u, qd):
        coeffs = self.velocity_table(u)[self.cell_dofs]  # (T, 6, 2)
        return np.einsum("tic,qi->tqc", coeffs, qd.p2)

    def velocity_gradients_at(self, u, qd):
        coeffs = self.velocity_table(u)[self.cell_dofs]
        return np.einsum("tic,tqid->tqcd", coeffs, qd.grads)

    def pressure_values_at(self, p, qd):
        return np.einsum("ti,qi->tq", np.asarray(p, float)[self.mesh.triangles], qd.p1)

    def velocity_value(self, u, x):
        k, lam = self.mesh.locate(x)
        basis = reference.p2_values(lam[None, :])[0]
        coeffs = self.velocity_table(u)[self.cell_dofs[k]]
        return basis @ coeffs

    def pressure_value(self, p, x):
        k, lam = self.mesh.locate(x)
        return float(lam @ np.asarray(p, float)[self.mesh.triangles[k]])

    def interpolate_velocity(self, fn):
        vals = np.asarray(fn(self.dof_points), float).reshape(self.n_scalar, 2)
        return vals.ravel().copy()

    def interpolate_pressure(self, fn):
        return np.asarray(fn(self.mesh.nodes), float).reshape(self.n_p).copy()


@dataclass
class VelocityPressureField:
    """Discrete velocity-pressure pair. ``role`` tags how the field arose:
    state, adjoint, sensitivity or second-sensitivity."""

    space: TaylorHoodSpace
    velocity: np.ndarray
    pressure: np.ndarray
    role: str = "state"

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, float)
        self.pressure = np.asarray(self.pressure, float)
        if self.velocity.shape != (self.space.n_u,):
            raise ValueError("velocity coefficient vector has the wrong length")
        if self.pressure.shape != (self.space.n_p,):
            raise ValueError("pressure coefficient vector has the wrong length")

    def copy(self, role=None):
        return VelocityPressureField(
            self.space, self.velocity.copy(), self.pressure.copy(), role or self.role
        )


def zero_field(space, role="state"):
    return VelocityPressureField(space, np.zeros(space.n_u), np.zeros(space.n_p), role)


# ---------------------------------------------------------------------- #
# assembly                                                                #
# ---------------------------------------------------------------------- #
def _scalar_to_vector_matrix(space, ke):
    """Scatter per-element scalar blocks (T,6,6) into both velocity components."""
    cd = space.cell_dofs
    rows = np.broadcast_to(cd[:, :, None], ke.shape)
    cols = np.broadcast_to(cd[:, None, :], ke.shape)
    data, r, c = [], [], []
    for comp in (0, 1):
        r.append(2 * rows + comp)
        c.append(2 * cols + comp)
        data.append(ke)
    mat = sp.coo_matrix(
        (
            np.concatenate([d.ravel() for d in data]),
            (
                np.concatenate([x.ravel() for x in r]),
                np.concatenate([x.ravel() for x in c]),
            ),
        ),
        shape=(space.n_u, space.n_u),
    )
    return mat.tocsr()


def _component_matrix(space, ke):
    """Scatter per-element component blocks (T,6,6,2,2): rows 2i+c, cols 2j+d."""
    cd = space.cell_dofs
    comp = np.arange(2)
    rows = 2 * cd[:, :, None, None, None] + comp[None, None, None, :, None]
    cols = 2 * cd[:, None, :, None, None] + comp[None, None, None, None, :]
    rows = np.broadcast_to(rows, ke.shape)
    cols = np.broadcast_to(cols, ke.shape)
    mat = sp.coo_matrix(
        (ke.ravel(), (rows.ravel(), cols.ravel())), shape=(space.n_u, space.n_u)
    )
    return mat.tocsr()


def _vector_load(space, fe):
    """Scatter per-element loads (T,6,2) into a global velocity vector."""
    out = np.zeros(space.n_u)
    cd = space.cell_dofs
    for comp in (0, 1):
        np.add.at(out, 2 * cd + comp, fe[:, :, comp])
    return out


@dataclass
class SaddleSystem:
    """Assembled Stokes blocks: viscous A, divergence B, velocity mass M and
    the pressure mean-value row m."""

    space: TaylorHoodSpace
    nu: float
    A: sp.csr_matrix
    B: sp.csr_matrix
    M: sp.csr_matrix
    m: np.ndarray


def assemble_stokes(space, nu, degree=4):
    """Viscous stiffness (nu times the vector Laplacian), divergence block,
    velocity mass matrix and pressure mean row; exact for the polynomial
    integrands at the default order."""
    if nu <= 0.0:
        raise ValueError(f"nu must be positive, got {nu}")
    qd = space.quadrature(degree)
    w, areas = qd.weights, space.areas
    stiff = np.einsum("q,tqid,tqjd,t->tij", w, qd.grads, qd.grads, areas)
    mass = np.einsum("q,qi,qj,t->tij", w, qd.p2, qd.p2, areas)
    A = nu * _scalar_to_vector_matrix(space, stiff)
    M = _scalar_to_vector_matrix(space, mass)

    de = np.einsum("q,qa,tqjd,t->tajd", w, qd.p1, qd.grads, areas)  # (T,3,6,2)
    tri = space.mesh.triangles
    rows = np.broadcast_to(tri[:, :, None, None], de.shape)
    comp = np.arange(2)
    cols = 2 * space.cell_dofs[:, None, :, None] + comp[None, None, None, :]
    cols = np.broadcast_to(cols, de.shape)
    B = sp.coo_matrix(
        (de.ravel(), (rows.ravel(), cols.ravel())), shape=(space.n_p, space.n_u)
    ).tocsr()

    m = np.zeros(space.n_p)
    me = np.einsum("q,qa,t->ta", w, qd.p1, areas)
    np.add.at(m, tri, me)
    return SaddleSystem(space=space, nu=nu, A=A, B=B, M=M, m=m)


def assemble_convection(space, y, degree=6):
    """Convective-form matrices for a velocity field y.

    C1 discretizes transport of the unknown by y, (y . grad) theta, tested
    against w; C2 discretizes (theta . grad) y tested against w. Equal to the
    divergence-form blocks up to integration by parts when div y = 0; the gap
    is reported separately, see :func:`convection_ibp_gap`.
    """
    u = y.velocity if isinstance(y, VelocityPressureField) else np.asarray(y, float)
    if u.shape != (space.n_u,):
        raise ValueError("velocity field does not belong to this space")
    qd = space.quadrature(degree)
    w, areas = qd.weights, space.areas
    yv = space.velocity_values_at(u, qd)
    yg = space.velocity_gradients_at(u, qd)

    ygradn = np.einsum("tqd,tqjd->tqj", yv, qd.grads)  # (y . grad N_j)
    c1 = np.einsum("q,qi,tqj,t->tij", w, qd.p2, ygradn, areas)
    C1 = _scalar_to_vector_matrix(space, c1)

    c2 = np.einsum("q,qi,qj,tqcd,t->tijcd", w, qd.p2, qd.p2, yg, areas)
    C2 = _component_matrix(space, c2)
    return C1, C2


def assemble_convection_tensor(space, y, degree=6):
    """Divergence-form (tensor) linearization blocks for a velocity field y.

    With the momentum nonlinearity written as -int u (x) u : grad w, the
    Jacobian contribution is -(T1 + T2) for the blocks returned here.
    """
    u = y.velocity if isinstance(y, VelocityPressureField) else np.asarray(y, float)
    if u.shape != (space.n_u,):
        raise ValueError("velocity field does not belong to this space")
    qd = space.quadrature(degree)
    w, areas = qd.weights, space.areas
    yv = space.velocity_values_at(u, qd)

    t1 = np.einsum("q,tqc,qj,tqid,t->tijcd", w, yv, qd.p2, qd.grads, areas)
    T1 = _component_matrix(space, t1)

    ygradn = np.einsum("tqd,tqid->tqi", yv, qd.grads)  # (y . grad N_i)
    t2 = np.einsum("q,qj,tqi,t->tij", w, qd.p2, ygradn, areas)
    T2 = _scalar_to_vector_matrix(space, t2)
    return T1, T2


def convection_vector(space, u, form="tensor", degree=6):
    """Nonlinear momentum term of the state residual, tested with velocity basis functions.

    ``tensor``: entries of int u (x) u : grad w (the weak divergence form).
    ``convective``: entries of int (u . grad) u . w.
    """
    u = np.asarray(u, float)
    qd = space.quadrature(degree)
    w, areas = qd.weights, space.areas
    yv = space.velocity_values_at(u, qd)
    if form == "tensor":
        ygradn = np.einsum("tqd,tqkd->tqk", yv, qd.grads)
        fe = np.einsum("q,tqc,tqk,t->tkc", w, yv, ygradn, areas)
    elif form == "convective":
        yg = space.velocity_gradients_at(u, qd)
        adv = np.einsum("tqd,tqcd->tqc", yv, yg)
        fe = np.einsum("q,tqc,qk,t->tkc", w, adv, qd.p2, areas)
    else:
        raise ValueError(f"unknown convection form {form!r}")
    return _vector_load(space, fe)


def convection_ibp_gap(space, u, degree=6):
    """Monitored diagnostic: relative discrepancy between the divergence-form
    and convective-form nonlinear terms (zero in the continuum for
    divergence-free fields, nonzero discretely)."""
    t = convection_vector(space, u, "tensor", degree)
    c = convection_vector(space, u, "convective", degree)
    scale = max(np.linalg.norm(t), np.linalg.norm(c))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(t + c) / scale)


def assemble_pair_tensor_load(space, theta1, theta2, degree=6):
    """Load int (theta1 (x) theta2 + theta2 (x) theta1) : grad w, assembled by quadrature.

    The symmetrized tensor is formed pointwise before contracting, so the
    result is bitwise symmetric in (theta1, theta2).
    """
    u1 = theta1.velocity if isinstance(theta1, VelocityPressureField) else theta1
    u2 = theta2.velocity if isinstance(theta2, VelocityPressureField) else theta2
    qd = space.quadrature(degree)
    v1 = space.velocity_values_at(np.asarray(u1, float), qd)
    v2 = space.velocity_values_at(np.asarray(u2, float), qd)
    s = np.einsum("tqc,tqd->tqcd", v1, v2)
    s = s + np.einsum("tqc,tqd->tqcd", v2, v1)
    fe = np.einsum("q,tqcd,tqkd,t->tkc", qd.weights, s, qd.grads, space.areas)
    return _vector_load(space, fe)


def assemble_dirac_load(space, sources, U):
    """Point-force load: each source point t, a mesh node by grading, puts its
    amplitude into the two velocity DOFs collocated at t (Lagrange property)."""
    pts = np.asarray(getattr(sources, "points", sources), float).reshape(-1, 2)
    amps = np.asarray(U, float).reshape(len(pts), 2)
    mesh = space.mesh
    tol = 1e-12 * (mesh.domain.diameter if mesh.domain is not None else 1.0)
    F = np.zeros(space.n_u)
    for p, a in zip(pts, amps):
        node = mesh.node_at(p, tol)
        if node < 0:
            raise PointLocationError(
                f"source point {p} is not a mesh node; grade the mesh toward it first"
            )
        F[2 * node] += a[0]
        F[2 * node + 1] += a[1]
    return F


def assemble_body_load(space, f, degree=8, subdivide=1):
    """Load vector for a smooth body force given as a vectorized callback x -> f(x)."""
    qd = space.quadrature(degree, subdivide)
    x = qd.points
    fv = np.asarray(f(x.reshape(-1, 2)), float).reshape(x.shape)
    fe = np.einsum("q,tqc,qk,t->tkc", qd.weights, fv, qd.p2, space.areas)
    return _vector_load(space, fe)


def tracking_functional(space, u, target, degree=6):
    """Tracking term 0.5 * int |u_h - target|^2 and its gradient w.r.t. the
    velocity coefficients, evaluated with one shared quadrature loop so the
    pair is exactly consistent (the gradient is the exact derivative of the
    returned value)."""
    qd = space.quadrature(degree)
    yv = space.velocity_values_at(np.asarray(u, float), qd)
    if isinstance(target, VelocityPressureField):
        gv = space.velocity_values_at(target.velocity, qd)
    elif callable(target):
        x = qd.points
        gv = np.asarray(target(x.reshape(-1, 2)), float).reshape(x.shape)
    else:
        gv = space.velocity_values_at(np.asarray(target, float), qd)
    diff = yv - gv
    value = 0.5 * float(
        np.einsum("q,tqc,tqc,t->", qd.weights, diff, diff, space.areas)
    )
    fe = np.einsum("q,tqc,qk,t->tkc", qd.weights, diff, qd.p2, space.areas)
    return value, _vector_load(space, fe)


def pressure_mean(system, p):
    """Mass-weighted mean of a discrete pressure (zero for gauged solutions)."""
    return float(system.m @ p) / float(system.m.sum())


# ---------------------------------------------------------------------- #
# saddle solves                                                           #
# ---------------------------------------------------------------------- #
def _inverse_norm1_estimate(lu, n):
    """Hager's deterministic estimate of the 1-norm of the inverse."""
    x = np.full(n, 1.0 / n)
    est = 0.0
    for _ in range(5):
        y = lu.solve(x)
        est = max(est, float(np.abs(y).sum()))
        xi = np.where(y >= 0.0, 1.0, -1.0)
        z = lu.solve(xi, trans="T")
        j = int(np.argmax(np.abs(z)))
        if np.abs(z[j]) <= float(z @ x):
            break
        x = np.zeros(n)
        x[j] = 1.0
    return est


def equilibrated_rcond(K):
    """Reciprocal 1-norm condition estimate after symmetric max-norm equilibration.

    The scaling strips nuisance row/column magnitudes (viscous rows are O(1),
    continuity rows O(h^2)), so the estimate tracks genuine closeness to
    singularity of the linearized operator rather than block scaling.
    Deterministic (Hager's estimator with a fixed start vector).
    """
    Kc = K.tocsr().copy()
    n = Kc.shape[0]
    for _ in range(2):
        row = np.abs(Kc).max(axis=1).toarray().ravel()
        row[row == 0.0] = 1.0
        D = sp.diags(1.0 / np.sqrt(row))
        Kc = D @ Kc @ D
    try:
        lu = spla.splu(Kc.tocsc())
    except RuntimeError:
        return 0.0
    norm1 = float(np.max(np.abs(Kc).sum(axis=0)))
    inv = _inverse_norm1_estimate(lu, n)
    if inv == 0.0:
        return np.inf
    return 1.0 / (norm1 * inv)


class FactorizedSaddle:
    """Sparse LU factorization of the constrained saddle matrix.

    Unknown ordering: interior velocity DOFs, pressures, gauge multiplier.
    Supports forward and transpose solves against the same factorization, so
    adjoint systems are solved with the exact transpose of the state Jacobian.
    """

    def __init__(self, system, convection=None):
        space = system.space
        self.space = space
        self.iu = space.interior_velocity_dofs
        self.n_i = len(self.iu)
        self.n_p = space.n_p
        J = system.A
        if convection:
            for coef, mat in convection:
                J = J + coef * mat
        Jii = J[self.iu][:, self.iu]
        Bi = system.B.tocsc()[:, self.iu]
        m = system.m
        self.K = sp.bmat(
            [
                [Jii, -Bi.T, None],
                [Bi, None, m[:, None]],
                [None, m[None, :], None],
            ],
            format="csc",
        )
        self.norm1 = float(np.max(np.abs(self.K).sum(axis=0)))
        try:
            self.lu = spla.splu(self.K)
        except RuntimeError as exc:  # exactly singular factorization
            raise SingularSystemError(f"saddle factorization failed: {exc}") from exc

    @property
    def size(self):
        return self.K.shape[0]

    def rcond_estimate(self):
        """Reciprocal condition estimate of the factorized matrix (1-norm, Hager)."""
        inv = _inverse_norm1_estimate(self.lu, self.size)
        if inv == 0.0:
            return np.inf
        return 1.0 / (self.norm1 * inv)

    def _solve_raw(self, b, transpose):
        trans = "T" if transpose else "N"
        op = self.K.T if transpose else self.K
        x = self.lu.solve(b, trans=trans)
        scale = max(float(np.linalg.norm(b)), self.norm1 * float(np.linalg.norm(x)), 1e-300)
        for _ in range(3):
            r = b - op @ x
            if float(np.linalg.norm(r)) <= _RESIDUAL_RTOL * scale:
                return x
            x = x + self.lu.solve(r, trans=trans)
            scale = max(
                float(np.linalg.norm(b)), self.norm1 * float(np.linalg.norm(x)), 1e-300
            )
        r = b - op @ x
        if float(np.linalg.norm(r)) > _RESIDUAL_RTOL * scale:
            raise SingularSystemError(
                "saddle solve did not reach the residual tolerance "
                f"(relative residual {float(np.linalg.norm(r)) / scale:.3e})",
                rcond=self.rcond_estimate(),
            )
        return x

    def solve(self, rhs_u, rhs_p=None, rhs_gauge=0.0, transpose=False):
        """Solve for (velocity, pressure, multiplier); velocity is returned on
        the full DOF set with zero boundary values."""
        rhs_u = np.asarray(rhs_u, float)
        b = np.concatenate(
            [
                rhs_u[self.iu],
                np.zeros(self.n_p) if rhs_p is None else np.asarray(rhs_p, float),
                [float(rhs_gauge)],
            ]
        )
        x = self._solve_raw(b, transpose)
        u = np.zeros(self.space.n_u)
        u[self.iu] = x[: self.n_i]
        p = x[self.n_i : self.n_i + self.n_p]
        lam = float(x[-1])
        return u, p, lam

    def residual(self, x_u, p, lam, rhs_u, rhs_p=None, rhs_gauge=0.0):
        b = np.concatenate(
            [
                np.asarray(rhs_u, float)[self.iu],
                np.zeros(self.n_p) if rhs_p is None else np.asarray(rhs_p, float),
                [float(rhs_gauge)],
            ]
        )
        x = np.concatenate([np.asarray(x_u, float)[self.iu], p, [lam]])
        return b - self.K @ x


def factorize_saddle(system, convection=None):
    return FactorizedSaddle(system, convection=convection)


def solve_saddle(system, rhs_u, convection=None, rhs_p=None, role="state", transpose=False):
    """Assemble-and-solve convenience wrapper returning a field with gauged pressure."""
    op = FactorizedSaddle(system, convection=convection)
    u, p, _ = op.solve(rhs_u, rhs_p=rhs_p, transpose=transpose)
    return VelocityPressureField(system.space, u, p, role=role)


def evaluate_velocity_at(field, x):
    """Exact quadratic evaluation of the velocity at a point in the domain."""
    return field.space.velocity_value(field.velocity, x)


# ---------------------------------------------------------------------- #
# field I/O                                                               #
# ---------------------------------------------------------------------- #
def _mesh_checksum(mesh):
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.nodes).tobytes())
    h.update(np.ascontiguousarray(mesh.triangles).tobytes())
    return h.hexdigest()


def save_field_npz(field, path):
    np.savez(
        path,
        velocity=field.velocity,
        pressure=field.pressure,
        role=np.array(field.role),
        mesh_checksum=np.array(_mesh_checksum(field.space.mesh)),
    )


def load_field_npz(space, path, role=None):
    data = np.load(path, allow_pickle=False)
    if str(data["mesh_checksum"]) != _mesh_checksum(space.mesh):
        raise ValueError(f"field file {path} was written for a different mesh")
    return VelocityPressureField(
        space,
        data["velocity"],
        data["pressure"],
        role=role or str(data["role"]),
    )


def write_field_vtk(field, path, title="pointflow field"):
    """Legacy ASCII VTK export with nodal velocity vectors and pressure scalars."""
    space = field.space
    mesh = space.mesh
    vel = space.velocity_table(field.velocity)[: mesh.n_nodes]
    with open(path, "w", newline="\n") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            f.write(f"{x:.16e} {y:.16e} 0.0\n")
        f.write(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {mesh.n_triangles}\n")
        for _ in range(mesh.n_triangles):
            f.write("5\n")
        f.write(f"POINT_DATA {mesh.n_nodes}\n")
        f.write("VECTORS velocity double\n")
        for vx, vy in vel:
            f.write(f"{vx:.16e} {vy:.16e} 0.0\n")
        f.write("SCALARS pressure double 1\n")
        f.write("LOOKUP_TABLE default\n")
        for pv in field.pressure:
            f.write(f"{pv:.16e}\n")
