"""Shared test utilities: manufactured solutions and independent error norms."""

import numpy as np
import sympy as sp

from pointflow import reference


def quad_error_norms(space, u_coeffs, u_exact, grad_exact, degree=6, subdivide=1):
    """L2 and H1-seminorm errors of a discrete velocity against callables,
    by composite quadrature independent of the assembly rules."""
    qd = space.quadrature(degree, subdivide)
    x = qd.points.reshape(-1, 2)
    uex = np.asarray(u_exact(x), float).reshape(qd.points.shape)
    gex = np.asarray(grad_exact(x), float).reshape(qd.points.shape[:2] + (2, 2))
    uh = space.velocity_values_at(u_coeffs, qd)
    gh = space.velocity_gradients_at(u_coeffs, qd)
    l2 = np.sqrt(np.einsum("q,tqc,tqc,t->", qd.weights, uh - uex, uh - uex, space.areas))
    h1 = np.sqrt(
        np.einsum("q,tqcd,tqcd,t->", qd.weights, gh - gex, gh - gex, space.areas)
    )
    return float(l2), float(h1)


def observed_orders(values):
    v = np.asarray(values, float)
    return np.log2(v[:-1] / v[1:])


class ManufacturedNS:
    """Divergence-free manufactured velocity/pressure with the matching body
    force f = -nu lap(u) + (u . grad) u + grad p, derived symbolically."""

    def __init__(self, nu=1.0):
        x, y = sp.symbols("x y")
        psi = sp.sin(sp.pi * x) ** 2 * sp.sin(sp.pi * y) ** 2 / sp.pi
        u1 = sp.diff(psi, y)
        u2 = -sp.diff(psi, x)
        p = sp.cos(sp.pi * x) * sp.sin(sp.pi * y)
        conv1 = u1 * sp.diff(u1, x) + u2 * sp.diff(u1, y)
        conv2 = u1 * sp.diff(u2, x) + u2 * sp.diff(u2, y)
        f1 = -nu * (sp.diff(u1, x, 2) + sp.diff(u1, y, 2)) + conv1 + sp.diff(p, x)
        f2 = -nu * (sp.diff(u2, x, 2) + sp.diff(u2, y, 2)) + conv2 + sp.diff(p, y)
        grads = (sp.diff(u1, x), sp.diff(u1, y), sp.diff(u2, x), sp.diff(u2, y))
        self._u = sp.lambdify((x, y), (u1, u2), "numpy")
        self._g = sp.lambdify((x, y), grads, "numpy")
        self._f = sp.lambdify((x, y), (f1, f2), "numpy")
        self.nu = nu

    def velocity(self, pts):
        a, b = self._u(pts[:, 0], pts[:, 1])
        return np.column_stack([np.broadcast_to(a, len(pts)), np.broadcast_to(b, len(pts))])

    def velocity_gradient(self, pts):
        g = self._g(pts[:, 0], pts[:, 1])
        out = np.empty((len(pts), 2, 2))
        for k, comp in enumerate(g):
            out[:, k // 2, k % 2] = comp
        return out

    def body_force(self, pts):
        a, b = self._f(pts[:, 0], pts[:, 1])
        return np.column_stack([np.broadcast_to(a, len(pts)), np.broadcast_to(b, len(pts))])


class ManufacturedStokes:
    """Polynomial divergence-free velocity with zero boundary trace and linear
    pressure; forcing for the Stokes operator only."""

    def __init__(self, nu=1.0):
        x, y = sp.symbols("x y")
        psi = x**2 * (1 - x) ** 2 * y**2 * (1 - y) ** 2
        u1 = sp.diff(psi, y)
        u2 = -sp.diff(psi, x)
        p = x - sp.Rational(1, 2)
        f1 = -nu * (sp.diff(u1, x, 2) + sp.diff(u1, y, 2)) + sp.diff(p, x)
        f2 = -nu * (sp.diff(u2, x, 2) + sp.diff(u2, y, 2)) + sp.diff(p, y)
        grads = (sp.diff(u1, x), sp.diff(u1, y), sp.diff(u2, x), sp.diff(u2, y))
        self._u = sp.lambdify((x, y), (u1, u2), "numpy")
        self._g = sp.lambdify((x, y), grads, "numpy")
        self._f = sp.lambdify((x, y), (f1, f2), "numpy")

    velocity = ManufacturedNS.velocity
    velocity_gradient = ManufacturedNS.velocity_gradient
    body_force = ManufacturedNS.body_force
