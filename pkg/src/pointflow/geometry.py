"""Polygonal domains, conforming triangle meshes, grading toward point sources, point location.

Meshes are immutable after construction and safe to share across threads;
grading operates on a private editor and freezes a new mesh. Dirac source
points are inserted as mesh nodes so that point loads and point evaluations
are exact at nodes.
"""

import numpy as np

from .errors import DomainGeometryError, PointLocationError

_INSIDE_BARY_TOL = 1e-9


def _segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


def _segments_properly_intersect(p1, p2, q1, q2):
    def orient(a, b, c):
        u, v = b - a, c - a
        return np.sign(u[0] * v[1] - u[1] * v[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


class PolygonDomain:
    """Simply connected polygon given by counter-clockwise vertices (no holes)."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise DomainGeometryError("polygon needs at least 3 two-dimensional vertices")
        area = 0.5 * float(
            np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        )
        if area <= 0.0:
            raise DomainGeometryError(
                f"polygon must be counter-clockwise with positive area (got {area:g})"
            )
        m = v.shape[0]
        for i in range(m):
            for j in range(i + 1, m):
                if abs(i - j) in (1, m - 1):
                    continue  # adjacent edges share a vertex by construction
                if _segments_properly_intersect(
                    v[i], v[(i + 1) % m], v[j], v[(j + 1) % m]
                ):
                    raise DomainGeometryError("polygon is self-intersecting")
        self.vertices = v
        self.signed_area = area

    @classmethod
    def unit_square(cls):
        return cls([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])

    @property
    def diameter(self):
        v = self.vertices
        d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        return float(np.sqrt(d2.max()))

    def boundary_distance(self, x):
        """Exact distance from x to the polygon boundary (min over edges)."""
        p = np.asarray(x, dtype=float)
        v = self.vertices
        return min(
            _segment_distance(p, v[i], v[(i + 1) % len(v)]) for i in range(len(v))
        )

    def contains(self, x, tol=0.0):
        """Point-in-polygon by ray crossing; `tol` >= 0 accepts points within that boundary distance."""
        p = np.asarray(x, dtype=float)
        if tol > 0.0 and self.boundary_distance(p) <= tol:
            return True
        v = self.vertices
        inside = False
        m = len(v)
        for i in range(m):
            a, b = v[i], v[(i + 1) % m]
            if (a[1] > p[1]) != (b[1] > p[1]):
                xcross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
                if p[0] < xcross:
                    inside = not inside
        return inside


class TriMesh:
    """Conforming triangle mesh with positively oriented elements.

    Fields: ``nodes`` (N,2), ``triangles`` (T,3), ``boundary_node_flags`` (N,),
    ``element_diameters`` (T,). Derived connectivity (edges, boundary edges,
    affine maps) is computed once at construction. Instances are treated as
    immutable.
    """

    def __init__(self, nodes, triangles, domain=None):
        self.nodes = np.asarray(nodes, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.domain = domain
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise ValueError("nodes must have shape (N, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must have shape (T, 3)")

        tri = self.nodes[self.triangles]  # (T, 3, 2)
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        self.signed_areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if np.any(self.signed_areas <= 0.0):
            bad = int(np.argmin(self.signed_areas))
            raise ValueError(
                f"triangle {bad} is degenerate or negatively oriented "
                f"(signed area {self.signed_areas[bad]:g})"
            )

        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
        pairs.sort(axis=1)
        self.edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        self.triangle_edges = inv.reshape(3, -1).T  # columns: edge(01), edge(12), edge(20)
        counts = np.bincount(inv, minlength=len(self.edges))
        if counts.max() > 2:
            raise ValueError("mesh is not conforming: an edge is shared by >2 triangles")
        self.boundary_edge_flags = counts == 1
        self.boundary_node_flags = np.zeros(len(self.nodes), dtype=bool)
        self.boundary_node_flags[self.edges[self.boundary_edge_flags].ravel()] = True

        lengths = np.stack(
            [
                np.hypot(*(tri[:, 1] - tri[:, 0]).T),
                np.hypot(*(tri[:, 2] - tri[:, 1]).T),
                np.hypot(*(tri[:, 0] - tri[:, 2]).T),
            ],
            axis=1,
        )
        self.element_diameters = lengths.max(axis=1)

        # inverse affine maps for barycentric coordinates
        mats = np.stack([e1, e2], axis=-1)  # (T, 2, 2), columns e1 | e2
        det = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
        inv_mats = np.empty_like(mats)
        inv_mats[:, 0, 0] = mats[:, 1, 1]
        inv_mats[:, 0, 1] = -mats[:, 0, 1]
        inv_mats[:, 1, 0] = -mats[:, 1, 0]
        inv_mats[:, 1, 1] = mats[:, 0, 0]
        self._inv_maps = inv_mats / det[:, None, None]
        self._origins = tri[:, 0]

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def barycentric_all(self, x):
        """Barycentric coordinates of x w.r.t. every triangle, shape (T, 3)."""
        p = np.asarray(x, dtype=float)
        loc = np.einsum("tij,tj->ti", self._inv_maps, p - self._origins)
        return np.column_stack([1.0 - loc[:, 0] - loc[:, 1], loc])

    def locate(self, x, tol=_INSIDE_BARY_TOL):
        """Containing triangle and barycentric coordinates of x.

        Raises PointLocationError when x lies outside every element by more
        than `tol` in barycentric units. Near-boundary coordinates are clamped
        to the simplex and renormalized.
        """
        bary = self.barycentric_all(x)
        k = int(np.argmax(bary.min(axis=1)))
        lam = bary[k]
        if lam.min() < -tol:
            raise PointLocationError(f"point {np.asarray(x)} is outside the mesh")
        lam = np.clip(lam, 0.0, None)
        return k, lam / lam.sum()

    def node_at(self, x, tol):
        """Index of the mesh node within distance tol of x, or -1."""
        d = np.hypot(*(self.nodes - np.asarray(x, float)).T)
        i = int(np.argmin(d))
        return i if d[i] <= tol else -1


def locate_point(mesh, x, tol=_INSIDE_BARY_TOL):
    """Locate x in the mesh: returns (triangle index, barycentric coordinates)."""
    return mesh.locate(x, tol=tol)


def build_unit_square_mesh(n):
    """Structured mesh of the unit square: n subdivisions per side, 2 n^2 triangles."""
    if n < 2:
        raise ValueError(f"need at least 2 subdivisions per side, got {n}")
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def nid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10 = nid(i, j), nid(i + 1, j)
            v01, v11 = nid(i, j + 1), nid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return TriMesh(nodes, np.array(tris), domain=PolygonDomain.unit_square())


def _ekey(a, b):
    return (a, b) if a < b else (b, a)


class _MeshEditor:
    """Mutable mesh view supporting node insertion and conforming longest-edge bisection."""

    def __init__(self, mesh):
        self.nodes = [tuple(p) for p in mesh.nodes]
        self.tris = [tuple(t) for t in mesh.triangles]
        self.edge_tris = {}
        for k in range(len(self.tris)):
            self._link(k)
        self._mid_cache = {}

    def _link(self, k):
        a, b, c = self.tris[k]
        for key in (_ekey(a, b), _ekey(b, c), _ekey(c, a)):
            self.edge_tris.setdefault(key, set()).add(k)

    def _unlink(self, k):
        a, b, c = self.tris[k]
        for key in (_ekey(a, b), _ekey(b, c), _ekey(c, a)):
            group = self.edge_tris.get(key)
            if group is not None:
                group.discard(k)
                if not group:
                    del self.edge_tris[key]

    def alive(self, k):
        return self.tris[k] is not None

    def add_node(self, p):
        self.nodes.append((float(p[0]), float(p[1])))
        return len(self.nodes) - 1

    def _length(self, key):
        a, b = self.nodes[key[0]], self.nodes[key[1]]
        return float(np.hypot(a[0] - b[0], a[1] - b[1]))

    def diameter(self, k):
        a, b, c = self.tris[k]
        return max(
            self._length(_ekey(a, b)), self._length(_ekey(b, c)), self._length(_ekey(c, a))
        )

    def longest_edge(self, k):
        a, b, c = self.tris[k]
        keys = (_ekey(a, b), _ekey(b, c), _ekey(c, a))
        # deterministic tie-break: length first, then lexicographic key
        return max(keys, key=lambda e: (self._length(e), (-e[0], -e[1])))

    def neighbor(self, k, key):
        others = self.edge_tris.get(key, set()) - {k}
        return next(iter(others)) if others else None

    def _rotated(self, k, key):
        t = self.tris[k]
        for i in range(3):
            if _ekey(t[i], t[(i + 1) % 3]) == key:
                return t[i], t[(i + 1) % 3], t[(i + 2) % 3]
        raise KeyError(f"edge {key} not in triangle {k}")

    def midpoint_node(self, key):
        m = self._mid_cache.get(key)
        if m is None:
            a, b = self.nodes[key[0]], self.nodes[key[1]]
            m = self.add_node(((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0))
            self._mid_cache[key] = m
        return m

    def split_triangle(self, k, key, mid):
        """Replace triangle k by its two halves across edge `key` through node `mid`."""
        p, q, r = self._rotated(k, key)
        self._unlink(k)
        self.tris[k] = None
        for child in ((p, mid, r), (mid, q, r)):
            self.tris.append(child)
            self._link(len(self.tris) - 1)

    def bisect_conforming(self, k0):
        """Longest-edge bisection of triangle k0 with recursive closure (Rivara)."""
        stack = [k0]
        while stack:
            k = stack[-1]
            if not self.alive(k):
                stack.pop()
                continue
            key = self.longest_edge(k)
            nb = self.neighbor(k, key)
            if nb is None or self.longest_edge(nb) == key:
                mid = self.midpoint_node(key)
                self.split_triangle(k, key, mid)
                if nb is not None:
                    self.split_triangle(nb, key, mid)
                stack.pop()
            else:
                stack.append(nb)

    def barycentric(self, k, p):
        a, b, c = (np.asarray(self.nodes[i]) for i in self.tris[k])
        mat = np.column_stack([b - a, c - a])
        loc = np.linalg.solve(mat, np.asarray(p, float) - a)
        return np.array([1.0 - loc[0] - loc[1], loc[0], loc[1]])

    def insert_point(self, p, snap_tol):
        """Make p a mesh node: snap to an existing node, split an edge, or fan-split a triangle."""
        pts = np.asarray(self.nodes)
        d = np.hypot(*(pts - np.asarray(p, float)).T)
        nearest = int(np.argmin(d))
        if d[nearest] <= snap_tol:
            return nearest

        best_k, best_bary, best_min = -1, None, -np.inf
        for k in range(len(self.tris)):
            if not self.alive(k):
                continue
            bary = self.barycentric(k, p)
            if bary.min() > best_min:
                best_k, best_bary, best_min = k, bary, bary.min()
        if best_min < -1e-12:
            raise DomainGeometryError(f"point {np.asarray(p)} lies outside the mesh")

        t = self.tris[best_k]
        if best_min < 1e-12:  # on an edge: split both incident triangles through p
            j = int(np.argmin(best_bary))
            key = _ekey(t[(j + 1) % 3], t[(j + 2) % 3])
            node = self.add_node(p)
            for k in sorted(self.edge_tris.get(key, set())):
                self.split_triangle(k, key, node)
            return node
        node = self.add_node(p)
        a, b, c = t
        self._unlink(best_k)
        self.tris[best_k] = None
        for child in ((a, b, node), (b, c, node), (c, a, node)):
            self.tris.append(child)
            self._link(len(self.tris) - 1)
        return node

    def incident(self, node):
        return [k for k in range(len(self.tris)) if self.alive(k) and node in self.tris[k]]

    def freeze(self, domain):
        alive = [t for t in self.tris if t is not None]
        return TriMesh(np.asarray(self.nodes), np.asarray(alive), domain=domain)


def grade_toward_points(mesh, points, levels, ratio=0.5):
    """Refine the mesh toward each point: insert it as a node, then shrink the
    diameter of its incident elements by at least `ratio` per level using
    conforming longest-edge bisection.
    """
    pts = getattr(points, "points", points)
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if levels < 0:
        raise ValueError(f"levels must be >= 0, got {levels}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    domain = mesh.domain
    diam = domain.diameter if domain is not None else float(
        np.hypot(*(mesh.nodes.max(0) - mesh.nodes.min(0)))
    )
    if domain is not None:
        for p in pts:
            if not domain.contains(p) or domain.boundary_distance(p) <= 1e-12 * diam:
                raise DomainGeometryError(
                    f"grading point {p} is not strictly inside the domain"
                )

    ed = _MeshEditor(mesh)
    node_ids = [ed.insert_point(p, snap_tol=1e-12 * diam) for p in pts]
    for _ in range(levels):
        for node in node_ids:
            inc = ed.incident(node)
            if not inc:
                continue
            target = ratio * max(ed.diameter(k) for k in inc)
            for _guard in range(64):
                todo = [k for k in ed.incident(node) if ed.diameter(k) > target]
                if not todo:
                    break
                for k in todo:
                    if ed.alive(k) and ed.diameter(k) > target:
                        ed.bisect_conforming(k)
            else:  # pragma: no cover - bisection always shrinks diameters
                raise RuntimeError("grading did not reach the target diameter")
    return ed.freeze(domain)


def write_mesh_vtk(mesh, path, title="pointflow mesh"):
    """Export the mesh as a legacy ASCII VTK unstructured grid."""
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
