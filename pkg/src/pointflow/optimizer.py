"""Reduced-cost optimization over point-force amplitudes under box constraints.

Implements the full first- and second-order optimality toolbox: the adjoint
gradient (adjoint velocity at the source points plus the regularization
term), projection onto the box, the variational-inequality residual and its
per-component sign report, projected-gradient descent with Armijo
backtracking, the reduced Hessian assembled from sensitivity solves, critical
cones (exact and tau-relaxed), a second-order sufficiency verdict with
coercivity constant, and an empirical quadratic-growth probe.

Controls and gradients are plain (l, 2) float arrays ordered like the source
set; scalar components flatten to length 2l as [t0x, t0y, t1x, ...].
"""

import os
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import adjoint as adjoint_mod
from . import fem
from . import state as state_mod
from .errors import StateNotConvergedError

_STATE_CACHE_SIZE = 16


def _worker_count():
    try:
        return max(1, int(os.environ.get("PF_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class BoxConstraints:
    """Componentwise bounds a_t <= u_t <= b_t for every source point."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, float).reshape(-1, 2)
        hi = np.asarray(self.upper, float).reshape(-1, 2)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds must have the same shape")
        if not np.all(lo < hi):
            raise ValueError("bounds must satisfy lower < upper componentwise")

    @property
    def n_sources(self):
        return self.lower.shape[0]

    def contains(self, U, tol=0.0):
        U = np.asarray(U, float).reshape(self.lower.shape)
        return bool(np.all(U >= self.lower - tol) and np.all(U <= self.upper + tol))


def project_box(V, box):
    """Componentwise clamp onto the admissible box (idempotent)."""
    V = np.asarray(V, float).reshape(box.lower.shape)
    return np.clip(V, box.lower, box.upper)


def vi_residual(U, Psi, box):
    """Euclidean norm of U - P(U - Psi); zero iff the discrete variational
    inequality holds at U."""
    U = np.asarray(U, float).reshape(box.lower.shape)
    Psi = np.asarray(Psi, float).reshape(box.lower.shape)
    return float(np.linalg.norm(U - project_box(U - Psi, box)))


@dataclass
class KKTReport:
    """Per-component activity labels and gradient-sign compliance."""

    labels: list  # length 2l, entries in {lower-active, upper-active, inactive}
    psi: np.ndarray
    tol: float
    violations: list  # (flat index, label, psi value, requirement)

    @property
    def compliant(self):
        return not self.violations


def kkt_sign_report(U, Psi, box, tol=1e-8):
    """Classify every scalar component and check the first-order sign conditions:
    nonnegative gradient at the lower bound, nonpositive at the upper bound,
    and vanishing gradient at inactive components."""
    U = np.asarray(U, float).reshape(box.lower.shape).ravel()
    Psi = np.asarray(Psi, float).reshape(box.lower.shape).ravel()
    lo, hi = box.lower.ravel(), box.upper.ravel()
    geo = 1e-10 * (hi - lo)
    labels, violations = [], []
    for i in range(len(U)):
        if U[i] - lo[i] <= geo[i]:
            label, ok, req = "lower-active", Psi[i] >= -tol, "psi >= 0"
        elif hi[i] - U[i] <= geo[i]:
            label, ok, req = "upper-active", Psi[i] <= tol, "psi <= 0"
        else:
            label, ok, req = "inactive", abs(Psi[i]) <= tol, "psi = 0"
        labels.append(label)
        if not ok:
            violations.append((i, label, float(Psi[i]), req))
    return KKTReport(labels=labels, psi=Psi.copy(), tol=tol, violations=violations)


class ControlProblem:
    """Everything a reduced-cost evaluation needs: space, physics, sources,
    box and target, plus a small cache of recent state/adjoint solves keyed
    by the control vector."""

    def __init__(self, space, nu, eta, sources, box, target, state_opts=None):
        if eta <= 0.0:
            raise ValueError(f"eta must be positive, got {eta}")
        if box.n_sources != len(sources):
            raise ValueError("box constraints do not match the number of sources")
        self.space = space
        self.nu = float(nu)
        self.eta = float(eta)
        self.sources = sources
        self.box = box
        self.target = target
        self.state_opts = state_opts or state_mod.StateSolveOptions()
        self.system = fem.assemble_stokes(space, nu)
        self._cache = OrderedDict()
        self.n_state_solves = 0

    @property
    def n_controls(self):
        return 2 * len(self.sources)

    def _control(self, U):
        U = np.asarray(U, float).reshape(len(self.sources), 2)
        return U

    def _entry(self, U):
        key = self._control(U).tobytes()
        entry = self._cache.get(key)
        if entry is None:
            entry = {}
            self._cache[key] = entry
            if len(self._cache) > _STATE_CACHE_SIZE:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return entry

    def state(self, U):
        """Converged state for U; raises StateNotConvergedError otherwise."""
        U = self._control(U)
        entry = self._entry(U)
        st = entry.get("state")
        if st is None:
            warm = next(
                (e["state"] for e in reversed(self._cache.values()) if "state" in e),
                None,
            )
            st = state_mod.solve_state_assembled(
                self.system, self.sources, U, opts=self.state_opts, initial=warm
            )
            self.n_state_solves += 1
            if not st.converged and warm is not None:
                st = state_mod.solve_state_assembled(
                    self.system, self.sources, U, opts=self.state_opts
                )
                self.n_state_solves += 1
            entry["state"] = st
        if not st.converged:
            raise StateNotConvergedError(
                f"state solve did not converge for control {U.ravel()}", solution=st
            )
        return st

    def tracking(self, U):
        entry = self._entry(U)
        if "tracking" not in entry:
            st = self.state(U)
            value, _ = fem.tracking_functional(
                self.space, st.field.velocity, self.target
            )
            entry["tracking"] = value
        return entry["tracking"]

    def cost(self, U):
        U = self._control(U)
        return self.tracking(U) + 0.5 * self.eta * float(np.sum(U * U))

    def adjoint(self, U):
        entry = self._entry(U)
        if "adjoint" not in entry:
            entry["adjoint"] = adjoint_mod.solve_adjoint(self.state(U), self.target)
        return entry["adjoint"]

    def gradient(self, U):
        U = self._control(U)
        return self.adjoint(U).point_values + self.eta * U

    def sensitivity(self, U, V):
        """Derivative of the discrete state map at U in control direction V."""
        load = fem.assemble_dirac_load(self.space, self.sources, self._control(V))
        return state_mod.solve_linearized(self.state(U), load)


def reduced_cost(U, problem):
    """j(U): tracking misfit by mass quadrature plus the quadratic control term."""
    return problem.cost(U)


def reduced_gradient(U, problem):
    """Gradient entries Psi_t = z(t) + eta u_t from the discrete adjoint."""
    return problem.gradient(U)


@dataclass(frozen=True)
class ProjectedGradientOptions:
    tol: float = 1e-8
    max_iters: int = 2000
    initial_step: float = 1.0
    backtrack: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 30
    # the accepted step is carried over and regrown by 1/backtrack, so the
    # line search adapts to the curvature scale of the problem
    step_growth: bool = True
    max_step: float = 1e12


@dataclass
class OptimizeReport:
    iterates: list  # (control, cost, vi_residual) per accepted iterate
    final_control: np.ndarray
    converged: bool
    n_iters: int
    n_backtracks: int
    n_state_solves: int
    message: str


def projected_gradient(U0, box, problem, opts=None):
    """Projected-gradient descent with Armijo backtracking along the
    projection arc; stops when the variational-inequality residual reaches
    tolerance. Accepted steps never increase the cost. State solves that fail
    at a trial point reject the step and halve it."""
    opts = opts or ProjectedGradientOptions()
    U = np.asarray(U0, float).reshape(box.lower.shape)
    if not box.contains(U, tol=1e-12 * float(np.max(box.upper - box.lower))):
        raise ValueError("initial control is not inside the box")
    solves0 = problem.n_state_solves
    iterates = []
    total_backtracks = 0
    j = problem.cost(U)
    Psi = problem.gradient(U)
    message = "iteration budget exhausted"
    converged = False
    n_iters = 0
    carried_step = opts.initial_step
    for n_iters in range(opts.max_iters + 1):
        vi = vi_residual(U, Psi, box)
        iterates.append((U.copy(), j, vi))
        if vi <= opts.tol:
            converged = True
            message = "variational-inequality residual below tolerance"
            break
        if n_iters == opts.max_iters:
            break
        step = carried_step
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            U_trial = project_box(U - step * Psi, box)
            d = U_trial - U
            dnorm = float(np.linalg.norm(d))
            if dnorm == 0.0:
                break
            try:
                j_trial = problem.cost(U_trial)
            except StateNotConvergedError:
                total_backtracks += 1
                step *= opts.backtrack
                continue
            if j_trial <= j + opts.sufficient_decrease * float(np.sum(Psi * d)):
                accepted = True
                break
            total_backtracks += 1
            step *= opts.backtrack
        if not accepted:
            message = "no acceptable step along the projection arc"
            break
        if opts.step_growth:
            carried_step = min(step / opts.backtrack, opts.max_step)
        U, j = U_trial, j_trial
        Psi = problem.gradient(U)
    return OptimizeReport(
        iterates=iterates,
        final_control=U.copy(),
        converged=converged,
        n_iters=n_iters,
        n_backtracks=total_backtracks,
        n_state_solves=problem.n_state_solves - solves0,
        message=message,
    )


# ---------------------------------------------------------------------- #
# second-order machinery                                                  #
# ---------------------------------------------------------------------- #
def _pair_tensor_against_gradient(space, theta_values, z_grads, qd):
    """int (theta_a (x) theta_b + theta_b (x) theta_a) : grad z for all pairs."""
    s = np.einsum("atqc,btqd,tqcd,q,t->ab", theta_values, theta_values, z_grads,
                  qd.weights, space.areas)
    return s + s.T


def hessian_quadratic_form(U, V, problem):
    """Curvature of the reduced cost at U along the control direction V:
    the squared L2 norm of the sensitivity, twice the sensitivity tensor
    tested against the adjoint gradient, and the regularization term."""
    V = np.asarray(V, float).reshape(len(problem.sources), 2)
    adj = problem.adjoint(U)
    theta = problem.sensitivity(U, V)
    term1 = float(theta.velocity @ (problem.system.M @ theta.velocity))
    pair_load = fem.assemble_pair_tensor_load(problem.space, theta, theta)
    term2 = float(adj.field.velocity @ pair_load)
    return term1 + term2 + problem.eta * float(np.sum(V * V))


def assemble_reduced_hessian(U, problem):
    """Symmetric 2l x 2l reduced Hessian from one sensitivity solve per
    canonical control direction, all sharing the state factorization.
    PF_THREADS caps the worker count for the column solves (default 1)."""
    st = problem.state(U)
    adj = problem.adjoint(U)
    space = problem.space
    n = problem.n_controls
    loads = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        loads.append(fem.assemble_dirac_load(space, problem.sources, e.reshape(-1, 2)))

    lock = threading.Lock()

    def column(load):
        with lock:  # one factorization, serialized triangular solves
            return state_mod.solve_linearized(st, load).velocity

    workers = min(_worker_count(), n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            thetas = list(pool.map(column, loads))
    else:
        thetas = [column(load) for load in loads]
    Theta = np.column_stack(thetas)  # (n_u, 2l)

    G = Theta.T @ (problem.system.M @ Theta)
    qd = space.quadrature(6)
    theta_vals = np.stack(
        [space.velocity_values_at(th, qd) for th in thetas], axis=0
    )  # (2l, T, nq, 2)
    z_grads = space.velocity_gradients_at(adj.field.velocity, qd)
    W = _pair_tensor_against_gradient(space, theta_vals, z_grads, qd)
    return G + W + problem.eta * np.eye(n)


@dataclass(frozen=True)
class ConeDescription:
    """Critical cone at a control: components fixed to zero where the gradient
    exceeds the threshold, sign-restricted at active bounds, free elsewhere.

    ``sign`` entries: +1 requires >= 0 (lower bound active), -1 requires <= 0
    (upper bound active), 0 free. ``kind`` is "strict" (exact cone with a
    numerical zero tolerance) or "tau" (relaxed cone).
    """

    fixed: np.ndarray  # (2l,) bool
    sign: np.ndarray  # (2l,) int
    threshold: float
    kind: str

    @property
    def is_zero(self):
        return bool(self.fixed.all())

    @property
    def dim_free(self):
        return int(np.sum(~self.fixed & (self.sign == 0)))

    def contains(self, V, tol=1e-12):
        v = np.asarray(V, float).ravel()
        if np.any(np.abs(v[self.fixed]) > tol):
            return False
        if np.any(self.sign * v < -tol):
            return False
        return True

    def sample_directions(self, rng, count):
        """Uniform-ish random unit directions inside the cone (for oracles and probes)."""
        n = len(self.fixed)
        out = rng.normal(size=(count, n))
        out[:, self.fixed] = 0.0
        s = np.broadcast_to(self.sign, out.shape)
        out = np.where(s != 0, np.abs(out) * np.sign(s), out)
        norms = np.linalg.norm(out, axis=1)
        keep = norms > 0
        return out[keep] / norms[keep, None]


def critical_cone(U, Psi, box, tol_active=1e-8, tau=None):
    """Cone of critical directions at U.

    With ``tau=None`` this is the exact cone (components with a nonzero
    gradient, beyond ``tol_active``, at an active bound are fixed to zero);
    with ``tau`` set it is the relaxed cone fixing every component whose
    gradient magnitude exceeds tau. Sign restrictions apply at active bounds
    either way.
    """
    U = np.asarray(U, float).reshape(box.lower.shape).ravel()
    Psi = np.asarray(Psi, float).reshape(box.lower.shape).ravel()
    lo, hi = box.lower.ravel(), box.upper.ravel()
    geo = 1e-10 * (hi - lo)
    active_lo = U - lo <= geo
    active_hi = hi - U <= geo
    if tau is None:
        fixed = (np.abs(Psi) > tol_active) & (active_lo | active_hi)
        kind, threshold = "strict", tol_active
    else:
        fixed = np.abs(Psi) > tau
        kind, threshold = "tau", tau
    sign = np.zeros(len(U), dtype=int)
    sign[active_lo & ~fixed] = 1
    sign[active_hi & ~fixed] = -1
    return ConeDescription(fixed=fixed, sign=sign, threshold=threshold, kind=kind)


def cone_quadratic_minimum(H, cone, feas_tol=1e-12):
    """Exact minimum Rayleigh quotient of H over the cone (inf over the unit
    sphere intersected with the cone).

    Fixed components are eliminated; the sign-constrained block is handled by
    enumerating zero-patterns and keeping eigenvectors that are feasible for
    the remaining nonnegativity constraints (every candidate value is
    attained by a feasible direction, and the global minimizer is among the
    candidates). Returns +inf for the trivial cone. A deterministic sampling
    sweep guards degenerate eigenspaces.
    """
    H = np.asarray(H, float)
    act = np.nonzero(~cone.fixed)[0]
    if len(act) == 0:
        return np.inf
    Ha = H[np.ix_(act, act)]
    sgn = cone.sign[act]
    flip = np.where(sgn < 0, -1.0, 1.0)
    Ha = Ha * np.outer(flip, flip)  # now every sign constraint reads >= 0
    constrained = np.nonzero(sgn != 0)[0]
    m = len(act)

    best = np.inf
    for pattern in range(1 << len(constrained)):
        zeroed = {constrained[i] for i in range(len(constrained)) if pattern >> i & 1}
        keep = [i for i in range(m) if i not in zeroed]
        if not keep:
            continue
        sub = Ha[np.ix_(keep, keep)]
        pos = [keep.index(i) for i in constrained if i not in zeroed]
        vals, vecs = np.linalg.eigh(sub)
        for lam, vec in zip(vals, vecs.T):
            scale = feas_tol * float(np.linalg.norm(vec))
            if (
                not pos
                or np.all(vec[pos] >= -scale)
                or np.all(-vec[pos] >= -scale)
            ):
                best = min(best, float(lam))

    # degenerate-eigenspace guard: feasible sampled directions only tighten upward
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(2048, m))
    s = np.broadcast_to(sgn, dirs.shape)
    dirs = np.where(s != 0, np.abs(dirs) * np.sign(s), dirs)
    dirs = dirs * flip  # back in the flipped coordinates the constraint is >= 0
    norms = np.linalg.norm(dirs, axis=1)
    dirs = dirs[norms > 0] / norms[norms > 0, None]
    sampled = np.einsum("ki,ij,kj->k", dirs, Ha, dirs)
    if len(sampled):
        best = min(best, float(sampled.min()))
    return best


@dataclass
class SecondOrderReport:
    """Second-order verdict at a stationary control."""

    hessian: np.ndarray
    active_lower: np.ndarray  # (2l,) bool
    active_upper: np.ndarray
    strongly_active: np.ndarray
    cone: ConeDescription
    strict_cone: ConeDescription
    tau: float
    ssc_verdict: bool
    kappa: float


def check_ssc(U, problem, tau=1e-6, tol_active=1e-8, vi_tol=1e-8, kappa_min=1e-10):
    """Second-order sufficiency at a stationary control: minimizes the Hessian
    Rayleigh quotient over the relaxed critical cone and reports the
    coercivity constant. A trivial cone is vacuously sufficient (kappa +inf)."""
    U = np.asarray(U, float).reshape(problem.box.lower.shape)
    Psi = problem.gradient(U)
    vi = vi_residual(U, Psi, problem.box)
    if vi > vi_tol:
        raise ValueError(
            f"check_ssc requires a stationary point (vi residual {vi:.3e} > {vi_tol:.1e})"
        )
    H = assemble_reduced_hessian(U, problem)
    box = problem.box
    lo, hi = box.lower.ravel(), box.upper.ravel()
    geo = 1e-10 * (hi - lo)
    flat = U.ravel()
    active_lower = flat - lo <= geo
    active_upper = hi - flat <= geo
    psi_flat = Psi.ravel()
    strongly_active = (active_lower | active_upper) & (np.abs(psi_flat) > tol_active)

    cone_tau = critical_cone(U, Psi, box, tol_active=tol_active, tau=tau)
    cone_strict = critical_cone(U, Psi, box, tol_active=tol_active, tau=None)
    kappa = cone_quadratic_minimum(H, cone_tau)
    verdict = bool(kappa == np.inf or kappa >= kappa_min)
    return SecondOrderReport(
        hessian=H,
        active_lower=active_lower,
        active_upper=active_upper,
        strongly_active=strongly_active,
        cone=cone_tau,
        strict_cone=cone_strict,
        tau=tau,
        ssc_verdict=verdict,
        kappa=float(kappa) if np.isfinite(kappa) else np.inf,
    )


@dataclass
class GrowthProbeReport:
    mu: float
    sigma: float
    n_samples: int
    violations: list  # (sample index, control, cost)


def quadratic_growth_probe(U, problem, sigma=1e-2, samples=50, seed=0):
    """Sample feasible controls within radius sigma of U and fit the largest
    mu >= 0 with j(U_s) >= j(U) + (mu/2) ||U_s - U||^2 across all samples.
    Violations (cost decreases) are reported; the fitted value is empirical,
    no claim is made about the existential constants."""
    U = np.asarray(U, float).reshape(problem.box.lower.shape)
    rng = np.random.default_rng(seed)
    j0 = problem.cost(U)
    quotients = []
    violations = []
    produced = 0
    while produced < samples:
        direction = rng.normal(size=U.shape)
        nrm = float(np.linalg.norm(direction))
        if nrm == 0.0:
            continue
        radius = sigma * rng.random()
        Us = project_box(U + radius * direction / nrm, problem.box)
        dist = float(np.linalg.norm(Us - U))
        if dist < 1e-14:
            continue
        produced += 1
        js = problem.cost(Us)
        quotients.append(2.0 * (js - j0) / dist**2)
        if js < j0 - 1e-14 * max(1.0, abs(j0)):
            violations.append((produced - 1, Us, js))
    mu = max(0.0, min(quotients)) if quotients else 0.0
    return GrowthProbeReport(
        mu=mu, sigma=sigma, n_samples=produced, violations=violations
    )
