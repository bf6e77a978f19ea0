import numpy as np
import pytest

import pointflow as pf
from pointflow import fem


@pytest.fixture(scope="session")
def unit_domain():
    return pf.PolygonDomain.unit_square()


@pytest.fixture(scope="session")
def src1(unit_domain):
    return pf.DiracSourceSet.create([(0.5, 0.5)], unit_domain)


@pytest.fixture(scope="session")
def src2(unit_domain):
    return pf.DiracSourceSet.create([(0.35, 0.6), (0.7, 0.3)], unit_domain)


@pytest.fixture(scope="session")
def mesh1(src1):
    return pf.grade_toward_points(pf.build_unit_square_mesh(8), src1, levels=2, ratio=0.5)


@pytest.fixture(scope="session")
def space1(mesh1):
    return fem.TaylorHoodSpace(mesh1)


@pytest.fixture(scope="session")
def mesh2(src2):
    return pf.grade_toward_points(pf.build_unit_square_mesh(8), src2, levels=2, ratio=0.5)


@pytest.fixture(scope="session")
def space2(mesh2):
    return fem.TaylorHoodSpace(mesh2)


@pytest.fixture(scope="session")
def state1(space1, src1):
    sol = pf.solve_state(space1, 1.0, src1, [(0.3, -0.2)])
    assert sol.converged
    return sol
