import numpy as np
import pytest
from shapely.geometry import Polygon

import pointflow as pf
from pointflow.errors import DomainGeometryError, PointLocationError
from pointflow.geometry import TriMesh


def test_unit_square_counts_n2():
    mesh = pf.build_unit_square_mesh(2)
    assert mesh.n_nodes == 9
    assert mesh.n_triangles == 8
    assert np.allclose(mesh.signed_areas, 0.125)


def test_unit_square_counts_n4():
    mesh = pf.build_unit_square_mesh(4)
    assert mesh.n_nodes == 25
    assert mesh.n_triangles == 32


def test_unit_square_rejects_small_n():
    with pytest.raises(ValueError):
        pf.build_unit_square_mesh(1)


def test_polygon_validation():
    with pytest.raises(DomainGeometryError):
        pf.PolygonDomain([(0, 0), (0, 1), (1, 1), (1, 0)])  # clockwise
    with pytest.raises(DomainGeometryError):
        pf.PolygonDomain([(0, 0), (1, 1), (1, 0), (0, 1)])  # bowtie


def test_polygon_boundary_distance_and_containment():
    dom = pf.PolygonDomain.unit_square()
    assert dom.boundary_distance((0.5, 0.5)) == pytest.approx(0.5)
    assert dom.boundary_distance((0.1, 0.7)) == pytest.approx(0.1)
    assert dom.contains((0.3, 0.3))
    assert not dom.contains((1.3, 0.3))


def test_grading_makes_point_a_node(src1):
    base = pf.build_unit_square_mesh(3)  # (0.5, 0.5) is not a node for odd n
    assert base.node_at((0.5, 0.5), 1e-12) < 0
    graded = pf.grade_toward_points(base, src1, levels=0)
    assert graded.node_at((0.5, 0.5), 1e-12) >= 0


def test_grading_levels0_idempotent(src1):
    base = pf.build_unit_square_mesh(3)
    once = pf.grade_toward_points(base, src1, levels=0)
    twice = pf.grade_toward_points(once, src1, levels=0)
    assert np.array_equal(once.nodes, twice.nodes)
    assert np.array_equal(once.triangles, twice.triangles)


def _diameters_at_point(mesh, p):
    node = mesh.node_at(p, 1e-12)
    assert node >= 0
    incident = np.any(mesh.triangles == node, axis=1)
    return mesh.element_diameters[incident]


def test_grading_shrinks_local_diameter(src1):
    base = pf.build_unit_square_mesh(8)
    initial = _diameters_at_point(
        pf.grade_toward_points(base, src1, levels=0), (0.5, 0.5)
    ).max()
    graded = pf.grade_toward_points(base, src1, levels=3, ratio=0.5)
    local = _diameters_at_point(graded, (0.5, 0.5))
    assert local.min() <= 0.5**3 * initial


def test_grading_rejects_outside_point():
    base = pf.build_unit_square_mesh(4)
    with pytest.raises(DomainGeometryError):
        pf.grade_toward_points(base, [(1.5, 0.5)], levels=1)


def test_grading_argument_validation(src1):
    base = pf.build_unit_square_mesh(4)
    with pytest.raises(ValueError):
        pf.grade_toward_points(base, src1, levels=-1)
    with pytest.raises(ValueError):
        pf.grade_toward_points(base, src1, levels=1, ratio=1.5)


def test_graded_mesh_conforming_shapely_oracle(src2):
    """Exhaustive pairwise check: triangles overlap only on shared nodes or a
    full shared edge (oracle independent of the mesh data structures)."""
    mesh = pf.grade_toward_points(pf.build_unit_square_mesh(4), src2, levels=3, ratio=0.5)
    assert np.all(mesh.signed_areas > 0.0)
    polys = [Polygon(mesh.nodes[t]) for t in mesh.triangles]
    tris = [set(map(tuple, np.round(mesh.nodes[t], 14))) for t in mesh.triangles]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            inter = polys[i].intersection(polys[j])
            assert inter.area < 1e-14, (i, j)
            shared = tris[i] & tris[j]
            if inter.length > 1e-12:  # overlap along a segment must be a full edge
                assert len(shared) == 2, (i, j)


def test_locate_centroid_and_vertex(mesh1):
    k = 7
    centroid = mesh1.nodes[mesh1.triangles[k]].mean(axis=0)
    kk, lam = pf.locate_point(mesh1, centroid)
    assert np.allclose(lam, 1 / 3)
    assert kk == k or np.allclose(
        mesh1.nodes[mesh1.triangles[kk]].mean(axis=0), centroid
    )
    vertex = mesh1.nodes[mesh1.triangles[k][0]]
    kk, lam = pf.locate_point(mesh1, vertex)
    assert np.max(lam) == pytest.approx(1.0, abs=1e-12)
    assert mesh1.triangles[k][0] in mesh1.triangles[kk]


def test_locate_reconstruction_and_bruteforce_oracle(mesh1):
    rng = np.random.default_rng(0)
    diam = mesh1.domain.diameter
    pts = rng.random((1000, 2)) * 0.98 + 0.01
    for p in pts:
        k, lam = mesh1.locate(p)
        rec = lam @ mesh1.nodes[mesh1.triangles[k]]
        assert np.linalg.norm(rec - p) <= 1e-12 * diam
        # brute-force scan oracle: element-by-element barycentric test
        found = []
        for kk, tri in enumerate(mesh1.triangles):
            a, b, c = mesh1.nodes[tri]
            mat = np.column_stack([b - a, c - a])
            loc = np.linalg.solve(mat, p - a)
            bary = np.array([1 - loc.sum(), loc[0], loc[1]])
            if bary.min() >= -1e-12:
                found.append(kk)
        assert k in found


def test_locate_outside_raises(mesh1):
    with pytest.raises(PointLocationError):
        mesh1.locate((1.2, 0.5))


def test_mesh_rejects_inverted_triangle():
    nodes = [(0, 0), (1, 0), (0, 1)]
    with pytest.raises(ValueError):
        TriMesh(nodes, [(0, 2, 1)])


def test_vtk_mesh_export(tmp_path, mesh1):
    path = tmp_path / "mesh.vtk"
    pf.write_mesh_vtk(mesh1, path)
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert "DATASET UNSTRUCTURED_GRID" in text
    assert f"POINTS {mesh1.n_nodes} double" in text
    assert text.count("5") >= mesh1.n_triangles
