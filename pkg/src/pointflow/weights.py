"""Distance weights around the control points and weighted norm quadrature.

The weight equals |x - t|^alpha near each source point t (globally for a
single source) and 1 away from all of them, with the crossover at half the
separation of the source set. Exponents alpha in (0, 2) keep the weight in
the Muckenhoupt A2 class and make point loads continuous on the weighted
test space. All types here are immutable and all operations pure.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainGeometryError


def compute_separation(points, domain):
    """Separation of a source set: distance to the boundary, and for two or
    more points also the minimum pairwise distance. Computed exactly against
    the polygon edges."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 1:
        raise ValueError("need at least one source point")
    bdist = np.inf
    for p in pts:
        if not domain.contains(p):
            raise DomainGeometryError(f"source point {p} is outside the domain")
        d = domain.boundary_distance(p)
        if d <= 0.0:
            raise DomainGeometryError(f"source point {p} lies on the domain boundary")
        bdist = min(bdist, d)
    if len(pts) == 1:
        return float(bdist)
    diff = pts[:, None, :] - pts[None, :, :]
    pair = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(pair, np.inf)
    closest = float(pair.min())
    if closest == 0.0:
        raise DomainGeometryError("source points must be pairwise distinct")
    return float(min(bdist, closest))


@dataclass(frozen=True)
class DiracSourceSet:
    """Ordered control support points with their separation."""

    points: np.ndarray
    separation: float
    domain: object = field(default=None, repr=False)

    @classmethod
    def create(cls, points, domain):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return cls(points=pts, separation=compute_separation(pts, domain), domain=domain)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class MuckenhouptWeight:
    """Piecewise distance weight rho(x) built from a source set and exponent alpha in (0, 2)."""

    alpha: float
    sources: DiracSourceSet

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0,2), got {self.alpha}")

    def _distances(self, x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        diff = pts[:, None, :] - self.sources.points[None, :, :]
        return pts, np.hypot(diff[..., 0], diff[..., 1])

    def eval(self, x):
        """rho(x); vectorized over rows of x. Zero exactly at the source points."""
        pts, d = self._distances(x)
        dmin = d.min(axis=1)
        if len(self.sources) == 1:
            out = dmin**self.alpha
        else:
            near = dmin < 0.5 * self.sources.separation  # strict, as defined
            out = np.where(near, dmin**self.alpha, 1.0)
        return out if np.asarray(x).ndim > 1 else float(out[0])

    def eval_inverse(self, x):
        """1/rho(x); +inf at the source points (quadrature never samples there)."""
        rho = np.atleast_1d(self.eval(x))
        with np.errstate(divide="ignore"):
            inv = np.where(rho > 0.0, 1.0 / np.where(rho > 0.0, rho, 1.0), np.inf)
        return inv if np.asarray(x).ndim > 1 else float(inv[0])


def eval_weight(weight, x):
    return weight.eval(x)


def eval_weight_inverse(weight, x):
    return weight.eval_inverse(x)


def _element_groups(space, weight):
    """Split elements into those touching a source node and the rest."""
    mesh = space.mesh
    adjacent = np.zeros(mesh.n_triangles, dtype=bool)
    if weight is not None:
        tol = 1e-12 * (
            mesh.domain.diameter if mesh.domain is not None else 1.0
        )
        for p in weight.sources.points:
            node = mesh.node_at(p, tol)
            if node >= 0:
                adjacent |= np.any(mesh.triangles == node, axis=1)
    return adjacent


def _accumulate_gradient_quadrature(space, field, weight, sign, power, base_degree):
    """Sum of w_q |grad v|^power rho^sign over the mesh, with an order-6 rule
    on elements incident to a source node (points avoid the node itself)."""
    adjacent = _element_groups(space, weight)
    total = 0.0
    for mask, degree in ((~adjacent, base_degree), (adjacent, max(base_degree, 6))):
        if not mask.any():
            continue
        qd = space.quadrature(degree)
        grads = space.velocity_gradients_at(field.velocity, qd)[mask]  # (T', nq, 2, 2)
        norm2 = np.einsum("tqcd,tqcd->tq", grads, grads)
        integrand = norm2 if power == 2.0 else norm2 ** (power / 2.0)
        if weight is not None:
            x = qd.points[mask]  # (T', nq, 2)
            rho = weight.eval(x.reshape(-1, 2)).reshape(x.shape[:2])
            if sign < 0:
                if np.any(rho == 0.0):
                    raise RuntimeError(
                        "quadrature point coincides with a source point; "
                        "the rule construction forbids this"
                    )
                integrand = integrand / rho
            else:
                integrand = integrand * rho
        total += float(
            np.einsum("tq,q,t->", integrand, qd.weights, space.areas[mask])
        )
    return total


def weighted_seminorm(field, weight, sign=1, order=4):
    """Weighted H1 seminorm ||grad v||_{L2(rho^sign)} of a discrete velocity.

    ``weight=None`` gives the unweighted seminorm. ``sign`` is +1 for the
    state space weight and -1 for the test space weight.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    value = _accumulate_gradient_quadrature(
        field.space, field, weight, sign, power=2.0, base_degree=order
    )
    return float(np.sqrt(value))


def lp_seminorm(field, p, order=4):
    """L^p seminorm ||grad v||_{L^p} for p in (1,2); diagnostic for the low-regularity regime."""
    if not 1.0 < p < 2.0:
        raise ValueError(f"p must lie in (1,2), got {p}")
    value = _accumulate_gradient_quadrature(
        field.space, field, None, 1, power=p, base_degree=order
    )
    return float(value ** (1.0 / p))


def estimate_A2_characteristic(weight, sample_balls, seed, points_per_ball=256):
    """Monte Carlo lower bound on the Muckenhoupt characteristic restricted to the domain.

    Samples balls contained in the domain of the weight's source set (the
    weight is undefined outside it) and maximizes (avg rho)(avg rho^-1); ball
    averages use a common point set so every ball estimate is >= 1. Sampling
    is prefix-stable in `sample_balls` for a fixed seed, so the estimate is
    nondecreasing as more balls are added.
    """
    if sample_balls < 1:
        raise ValueError("sample_balls must be >= 1")
    domain = weight.sources.domain
    if domain is None:
        raise ValueError("the weight's source set does not reference a domain")
    lo = domain.vertices.min(axis=0)
    hi = domain.vertices.max(axis=0)
    best = 0.0
    for child in np.random.SeedSequence(seed).spawn(sample_balls):
        rng = np.random.default_rng(child)
        for _ in range(1000):
            center = lo + (hi - lo) * rng.random(2)
            if domain.contains(center):
                break
        else:  # pragma: no cover - unit-square-like domains accept quickly
            continue
        radius = domain.boundary_distance(center) * rng.uniform(0.05, 1.0)
        r = radius * np.sqrt(rng.random(points_per_ball))
        phi = 2.0 * np.pi * rng.random(points_per_ball)
        pts = center + np.column_stack([r * np.cos(phi), r * np.sin(phi)])
        rho = weight.eval(pts)
        inv = weight.eval_inverse(pts)
        best = max(best, float(rho.mean() * inv.mean()))
    return best
