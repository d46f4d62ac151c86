import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppregion.geometry import (EmptyRegionError, PccPolygon, Polytope, fme_project, hausdorff,
                                polygon_membership, project_to_pcc, sample_polygon,
                                union_coverage)
from vppregion.oracle import FeasibleGrid

from helpers import random_polygon, random_polytope


def box_with_cut():
    A = np.vstack([np.eye(3), -np.eye(3), [[1.0, 0.0, 1.0]]])
    b = np.concatenate([np.ones(6), [0.5]])
    return Polytope(A, b)


def square(lo, hi):
    return PccPolygon.from_vertices([[lo, lo], [hi, lo], [hi, hi], [lo, hi]])


def same_square(poly, lo, hi):
    ref = square(lo, hi)
    return hausdorff(poly, ref) <= 1e-9 and poly.area == pytest.approx(ref.area)


def test_box_with_redundant_cut_projects_to_square():
    poly = project_to_pcc(box_with_cut())
    assert same_square(poly, -1.0, 1.0)
    assert same_square(fme_project(box_with_cut()), -1.0, 1.0)


def test_planar_projection_is_identity():
    A = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    b = np.array([1.0, 0.0, 0.0])
    poly = project_to_pcc(Polytope(A, b))
    ref = PccPolygon.from_vertices([[0, 0], [1, 0], [0, 1]])
    assert hausdorff(poly, ref) <= 1e-9


def test_point_polytope_gives_point_polygon():
    A = np.vstack([np.eye(3), -np.eye(3)])
    poly = project_to_pcc(Polytope(A, np.zeros(6)), offset=(0.3, -0.2))
    assert poly.vertices.shape == (1, 2)
    assert poly.vertices[0] == pytest.approx([0.3, -0.2])
    assert poly.area == 0.0
    assert poly.contains([0.3, -0.2])


def test_empty_polytope_signals():
    A = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    with pytest.raises(EmptyRegionError):
        project_to_pcc(Polytope(A, [-1.0, 0.0]))
    with pytest.raises(EmptyRegionError):
        fme_project(Polytope(np.vstack([A, np.eye(3)[1:], -np.eye(3)[1:]]),
                             [-1.0, 0.0, 1, 1, 1, 1]))


def test_unbounded_polytope_raises():
    with pytest.raises(ValueError):
        project_to_pcc(Polytope([[1.0, 0.0]], [1.0]))


def test_fme_refuses_high_dimension():
    with pytest.raises(ValueError):
        fme_project(random_polytope(np.random.default_rng(0), 9))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 5))
def test_sweep_agrees_with_elimination(seed, d):
    poly = random_polytope(np.random.default_rng(seed), d)
    a = project_to_pcc(poly)
    b = fme_project(poly)
    assert hausdorff(a, b) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 8))
def test_vertices_lift_and_touch_two_edges(seed, d):
    poly = random_polytope(np.random.default_rng(seed), d)
    pg = project_to_pcc(poly)
    for v, z in zip(pg.vertices, pg.liftings):
        assert poly.contains(z, 1e-9)
        assert z[:2] == pytest.approx(v)
        tight = np.abs(pg.A @ v - pg.b) <= 1e-9
        assert tight.sum() == 2
    assert pg.area > 0
    # counter-clockwise and convex
    e = np.roll(pg.vertices, -1, axis=0) - pg.vertices
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    assert np.all(cross > 0)


def test_membership_examples():
    a = square(0.0, 1.0)
    b = square(2.0, 3.0)
    assert polygon_membership(a, [0.5, 0.5])
    assert polygon_membership(a, [1.0, 1.0])
    assert not polygon_membership(a, [1.0 + 1e-3, 0.5])
    assert polygon_membership([a, b], [2.5, 2.5])
    assert not polygon_membership([a, b], [1.5, 1.5])
    assert not polygon_membership([], [0.5, 0.5])


def test_union_coverage_examples():
    g = np.linspace(0.0, 1.0, 5)
    grid = FeasibleGrid(g, g, np.ones((5, 5), bool))
    assert union_coverage([square(0.0, 1.0)], grid) == 1.0
    assert union_coverage([], grid) == 0.0
    half = union_coverage([square(0.0, 0.5)], grid)
    assert half == pytest.approx(9 / 25)
    empty = FeasibleGrid(g, g, np.zeros((5, 5), bool))
    assert union_coverage([square(0.0, 1.0)], empty) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_samples_stay_inside(seed):
    rng = np.random.default_rng(seed)
    pg = random_polygon(rng, rng.normal(size=2), 1.0)
    pts = sample_polygon(pg, 50, rng)
    assert all(pg.contains(p, 1e-9) for p in pts)


def test_polygon_roundtrip():
    pg = project_to_pcc(box_with_cut())
    back = PccPolygon.from_dict(pg.to_dict())
    assert np.array_equal(back.vertices, pg.vertices)
    assert np.array_equal(back.liftings, pg.liftings)
