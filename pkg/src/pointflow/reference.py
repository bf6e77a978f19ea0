"""Reference-element tables: interior Gauss rules on the triangle and Taylor-Hood shape functions.

All quadrature points are strictly interior to the reference triangle and
distinct from its vertices, so weights that vanish or blow up at mesh nodes
are never sampled at a node. Barycentric weights sum to one; multiply by the
physical triangle area when integrating.
"""

import numpy as np


def _perm3(a):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)]


def _perm6(a, b):
    c = 1.0 - a - b
    return [(c, a, b), (c, b, a), (a, c, b), (b, c, a), (a, b, c), (b, a, c)]


def _build_rules():
    rules = {}

    # degree 1: centroid
    rules[1] = (np.array([(1 / 3, 1 / 3, 1 / 3)]), np.array([1.0]))

    # degree 2: interior 3-point rule
    pts = _perm3(1.0 / 6.0)
    rules[2] = (np.array(pts), np.full(3, 1.0 / 3.0))

    # degree 4: Dunavant 6-point
    pts = _perm3(0.445948490915965) + _perm3(0.091576213509771)
    wts = [0.223381589678011] * 3 + [0.109951743655322] * 3
    rules[4] = (np.array(pts), np.array(wts))

    # degree 6: Dunavant 12-point
    pts = (
        _perm3(0.249286745170910)
        + _perm3(0.063089014491502)
        + _perm6(0.310352451033785, 0.053145049844816)
    )
    wts = [0.116786275726379] * 3 + [0.050844906370207] * 3 + [0.082851075618374] * 6
    rules[6] = (np.array(pts), np.array(wts))

    # degree 8: Dunavant 16-point
    pts = (
        [(1 / 3, 1 / 3, 1 / 3)]
        + _perm3(0.459292588292723)
        + _perm3(0.170569307751760)
        + _perm3(0.050547228317031)
        + _perm6(0.263112829634638, 0.728492392955404)
    )
    wts = (
        [0.144315607677787]
        + [0.095091634413923] * 3
        + [0.103217370534718] * 3
        + [0.032458497623198] * 3
        + [0.027230314174435] * 6
    )
    rules[8] = (np.array(pts), np.array(wts))

    for deg, (b, w) in rules.items():
        # published tables carry ~10 digits; renormalize so weights sum to 1 exactly
        assert abs(w.sum() - 1.0) < 5e-9, deg
        w /= w.sum()
        assert np.all(b > 0.0) and np.all(b < 1.0), deg
    return rules


_RULES = _build_rules()


def rule(degree):
    """Smallest tabulated rule exact for polynomials of the given total degree."""
    for d in sorted(_RULES):
        if d >= degree:
            b, w = _RULES[d]
            return b.copy(), w.copy()
    raise ValueError(f"no tabulated rule of degree >= {degree} (max {max(_RULES)})")


def refine_rule(bary, wts, levels=1):
    """Composite rule: apply the base rule on 4**levels uniform sub-triangles.

    Used for high-accuracy oracles and for body loads whose integrand is not
    polynomial. Returned weights again sum to one.
    """
    corners = np.array(
        [
            [(1, 0, 0), (0.5, 0.5, 0), (0.5, 0, 0.5)],
            [(0.5, 0.5, 0), (0, 1, 0), (0, 0.5, 0.5)],
            [(0.5, 0, 0.5), (0, 0.5, 0.5), (0, 0, 1)],
            [(0.5, 0.5, 0), (0, 0.5, 0.5), (0.5, 0, 0.5)],
        ],
        dtype=float,
    )
    b, w = np.asarray(bary, float), np.asarray(wts, float)
    for _ in range(levels):
        parts_b, parts_w = [], []
        for child in corners:
            parts_b.append(b @ child)  # affine map in barycentric coordinates
            parts_w.append(w / 4.0)
        b = np.vstack(parts_b)
        w = np.concatenate(parts_w)
    return b, w


def p2_values(bary):
    """Quadratic Lagrange basis at barycentric points.

    Local order: vertices (0,1,2), then edge midpoints (01, 12, 20).
    Returns an array of shape (npts, 6).
    """
    b = np.asarray(bary, float)
    l0, l1, l2 = b[:, 0], b[:, 1], b[:, 2]
    return np.stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ],
        axis=1,
    )


def p2_reference_gradients(bary):
    """Gradients of the quadratic basis w.r.t. reference coordinates (xi, eta).

    Reference triangle (0,0)-(1,0)-(0,1) with l0 = 1-xi-eta, l1 = xi, l2 = eta.
    Returns shape (npts, 6, 2).
    """
    b = np.asarray(bary, float)
    l0, l1, l2 = b[:, 0], b[:, 1], b[:, 2]
    n = b.shape[0]
    g = np.zeros((n, 6, 2))
    g[:, 0, 0] = -(4 * l0 - 1)
    g[:, 0, 1] = -(4 * l0 - 1)
    g[:, 1, 0] = 4 * l1 - 1
    g[:, 2, 1] = 4 * l2 - 1
    g[:, 3, 0] = 4 * (l0 - l1)
    g[:, 3, 1] = -4 * l1
    g[:, 4, 0] = 4 * l2
    g[:, 4, 1] = 4 * l1
    g[:, 5, 0] = -4 * l2
    g[:, 5, 1] = 4 * (l0 - l2)
    return g


def p1_values(bary):
    """Linear Lagrange basis (the barycentric coordinates themselves), shape (npts, 3)."""
    return np.asarray(bary, float).copy()


P1_REFERENCE_GRADIENTS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
