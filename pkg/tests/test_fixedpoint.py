from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppregion.explorer import construct_subregion
from vppregion.fixedpoint import (BrouwerBox, BrouwerConditionError, SingularAnchorError,
                                  bilinear_corner_bounds, build_fixed_point_model,
                                  build_omega_polytope, certify, check_brouwer_condition,
                                  flexible_controls, image_bounds, quadratic_corner_bounds)
from vppregion.geometry import sample_polygon
from vppregion.netmodel import control_incidence, newton_solve, participation, pcc_incidence
from vppregion.networks import nominal_point, six_bus, two_bus

from helpers import random_network


def test_quadratic_corner_examples():
    assert quadratic_corner_bounds(-2, 3) == (-9, 0)
    assert quadratic_corner_bounds(1, 2) == (-4, -1)
    assert quadratic_corner_bounds(-2, -1) == (-4, -1)
    assert quadratic_corner_bounds(0, 0) == (0, 0)
    with pytest.raises(ValueError):
        quadratic_corner_bounds(1, 0)


def test_bilinear_corner_examples():
    assert bilinear_corner_bounds(-1, 2, -3, 1) == (-6, 3)
    assert bilinear_corner_bounds(1, 2, 3, 4) == (3, 8)
    assert bilinear_corner_bounds(0, 0, -5, 7) == (0, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_corner_bounds_contain_samples(v):
    xl, xh = sorted(v[:2])
    yl, yh = sorted(v[2:])
    lo, hi = bilinear_corner_bounds(xl, xh, yl, yh)
    g = np.linspace(0, 1, 7)
    xs = xl + g * (xh - xl)
    ys = yl + g * (yh - yl)
    prod = np.outer(xs, ys)
    assert prod.min() >= lo - 1e-12 and prod.max() <= hi + 1e-12
    qlo, qhi = quadratic_corner_bounds(xl, xh)
    assert np.all(-xs ** 2 >= qlo - 1e-12) and np.all(-xs ** 2 <= qhi + 1e-12)


def model_at(net, u=None):
    u = net.u_nominal if u is None else u
    anchor = newton_solve(net, u).point
    return build_fixed_point_model(net, anchor, participation(net, anchor.u))


def test_fixed_point_identity_on_random_probes():
    rng = np.random.default_rng(0)
    for _ in range(20):
        net = random_network(rng)
        m = model_at(net)
        L = net.n_branches
        K1, K2 = pcc_incidence(net), control_incidence(net)
        E = np.zeros((net.n_e, L))
        E[2 * net.n_nodes + L + np.arange(L), np.arange(L)] = 1.0
        up, ut, R = rng.normal(size=2), rng.normal(size=net.n_u), rng.normal(size=L)
        z = m.F_pcc @ up + m.F_u @ ut + m.F_x @ R
        assert np.allclose(m.jac @ z, K1 @ up + K2 @ ut - E @ R, atol=1e-8)


def test_sign_split_invariants():
    m = model_at(six_bus())
    assert m.L_plus.min() >= 0 and m.L_minus.max() <= 0
    assert np.array_equal(m.L_plus + m.L_minus, m.L)
    assert np.array_equal(m.M_plus, m.L_plus - m.L_minus)
    assert np.all(m.H > 0)


def test_two_bus_scalings():
    net = two_bus(load_p=0.0, gen=((-0.1, 0.1), (-0.1, 0.1)))
    u = np.zeros(net.n_u)
    u[:2] = (0.05, 0.02)  # DER export, so the branch carries flow
    m = model_at(net, u)
    assert m.H.shape == (2,) and np.all(m.H > 0)
    # with no flow the current is flat to first order, so its row norm vanishes
    m0 = model_at(net, np.zeros(net.n_u))
    assert m0.H[0] > 0 and m0.H[1] == 0.0
    from vppregion.epsolver import build_ep_problems
    probs, _ = build_ep_problems(net, m0)
    assert all(np.all(p.H > 0) for _, p in probs.values())


def test_fixed_load_anchor_is_singular():
    net = two_bus()
    anchor = nominal_point(net)
    with pytest.raises(SingularAnchorError):
        build_fixed_point_model(net, anchor, participation(net, anchor.u))


def test_rebuild_is_identical():
    net = six_bus()
    a, b = model_at(net), model_at(net)
    for f in ("F_pcc", "F_u", "F_x"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def fake_model(M):
    return SimpleNamespace(M_plus=np.asarray(M, float))


def test_brouwer_condition_examples():
    n = 3
    box = BrouwerBox(-0.01 * np.ones(1), 0.01 * np.ones(1), -0.01 * np.ones(2), 0.01 * np.ones(2))
    M = np.zeros((n, 2))
    holds, slack = check_brouwer_condition(fake_model(M), box, np.zeros(2), np.zeros(2))
    assert holds and np.allclose(slack, 0.02)
    zero = BrouwerBox(np.zeros(1), np.zeros(1), np.zeros(2), np.zeros(2))
    holds, slack = check_brouwer_condition(fake_model(M), zero, np.zeros(2), np.zeros(2))
    assert holds and np.all(slack == 0)
    # rows of M+ summing to 2 with a remainder range of 0.02: -0.02 <= -0.04 fails by 0.02
    M = np.ones((n, 2))
    holds, slack = check_brouwer_condition(fake_model(M), box, -0.01 * np.ones(2), 0.01 * np.ones(2))
    assert not holds and np.allclose(slack, -0.02)


@pytest.fixture(scope="module")
def six_bus_region():
    net = six_bus()
    return net, construct_subregion(net, nominal_point(net))


def test_omega_contains_origin_and_rows_are_nonempty(six_bus_region):
    net, sr = six_bus_region
    cb = sr.cert
    assert np.all(cb.b_max - cb.b_min >= 0)
    poly = sr.omega(net)
    assert poly.contains(np.zeros(poly.dim))
    m = sr.model(net)
    assert check_brouwer_condition(m, cb.box, cb.Rmin, cb.Rmax)[0]


def test_soundness_chain_on_samples(six_bus_region):
    net, sr = six_bus_region
    m = sr.model(net)
    cb = sr.cert
    flex = flexible_controls(net)
    A_state = np.hstack([m.F_pcc, m.F_u[:, flex]])
    rng = np.random.default_rng(5)
    lo_off, hi_off = image_bounds(m, cb.Rmin, cb.Rmax)
    for p in sample_polygon(sr.polygon, 100, rng):
        from vppregion.explorer import lift_point
        ut = lift_point(net, sr, p)
        assert ut is not None
        U = A_state @ np.concatenate([p - sr.anchor.pcc, ut[flex]])
        R = rng.uniform(cb.Rmin, cb.Rmax)
        img = U + m.F_x @ R
        tol = 1e-8
        assert np.all(img >= cb.box.lo - tol) and np.all(img <= cb.box.hi + tol)
        assert np.all(U + lo_off >= cb.box.lo - tol) and np.all(U + hi_off <= cb.box.hi + tol)


def test_omega_refuses_empty_rows(six_bus_region):
    net, sr = six_bus_region
    m = sr.model(net)
    big = BrouwerBox(-np.ones(net.n_nodes - 1), np.ones(net.n_nodes - 1),
                     -np.ones(net.n_branches), np.ones(net.n_branches),
                     P_lo=-np.ones(net.n_branches), P_hi=np.ones(net.n_branches),
                     Q_lo=-np.ones(net.n_branches), Q_hi=np.ones(net.n_branches))
    cb = certify(m, big)
    assert np.any(cb.b_min > cb.b_max)
    with pytest.raises(BrouwerConditionError):
        build_omega_polytope(m, cb)


def test_box_roundtrip():
    box = BrouwerBox(-np.ones(2), np.ones(2), -np.ones(3), 2 * np.ones(3))
    back = BrouwerBox.from_dict(box.to_dict())
    assert np.array_equal(back.lo, box.lo) and np.array_equal(back.hi, box.hi)
