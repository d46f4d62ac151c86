import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppregion.epsolver import (BranchEpProblem, ep_grid_oracle, outer_box, solve_branch_ep,
                                solve_ep)
from vppregion.fixedpoint import (bilinear_corner_bounds, build_fixed_point_model,
                                  check_brouwer_condition)
from vppregion.netmodel import newton_solve, participation
from vppregion.networks import ieee33, network_from_dict, network_to_dict, six_bus

from helpers import random_ep_problem, random_network


def sym(d, e, c, H=1.0):
    return BranchEpProblem(-d, d, [-e], [e], [c], [H])


def test_objective_examples():
    p = sym(0.1, 0.1, 1.0)
    assert p.objective(np.zeros(4)) == 0.0
    assert p.objective([-0.1, 0.1, -0.1, 0.1]) == pytest.approx(-0.38)
    d, e, c, H = 0.07, 0.03, 2.5, 1.7
    p = sym(d, e, c, H)
    assert p.objective([-d, d, -e, e]) == pytest.approx((-2 * d - 2 * e + 2 * c * d * e) / H)


def test_zero_weight_gives_full_box():
    p = BranchEpProblem(-0.1, 0.05, [-0.02], [0.3], [0.0], [2.0])
    sol = solve_branch_ep(p)
    assert sol.x == pytest.approx([-0.1, 0.05, -0.02, 0.3])
    assert sol.objective == pytest.approx((-0.1 - 0.02 - 0.05 - 0.3) / 2.0)


def test_degenerate_box_gives_zero():
    sol = solve_branch_ep(BranchEpProblem(0.0, 0.0, [0.0], [0.0], [3.0], [1.0]))
    assert sol.objective == 0.0 and np.all(sol.x == 0)
    f, _, _ = ep_grid_oracle(BranchEpProblem(0.0, 0.0, [0.0], [0.0], [3.0], [1.0]), 11)
    assert f == 0.0


def test_small_box_example():
    p = sym(0.05, 0.05, 1.0)
    sol = solve_branch_ep(p)
    assert sol.objective == pytest.approx(-0.195)
    f, _, _ = ep_grid_oracle(p, 41)
    assert f == pytest.approx(-0.195)


def test_grid_oracle_limits():
    with pytest.raises(ValueError):
        ep_grid_oracle(sym(0.1, 0.1, 1.0), 62)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_solver_beats_grid_oracle(seed):
    p = random_ep_problem(np.random.default_rng(seed))
    sol = solve_branch_ep(p)
    f, _, step = ep_grid_oracle(p, 21)
    assert sol.objective <= 0.0
    assert sol.objective <= f + 2 * step * p.lipschitz()
    assert p.feasible(sol.x)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4))
def test_solutions_are_nonpositive_and_inside(seed, k):
    p = random_ep_problem(np.random.default_rng(seed), k)
    sol = solve_branch_ep(p)
    assert sol.objective <= 0.0
    assert p.feasible(sol.x)


def corner_and_width_checks(p, x, split_rng):
    """Corner tightness and the width inequality for every (lambda_x, lambda_y) pair."""
    vlo, vhi, ilo, ihi = p.unpack(x)
    rmin, rmax = bilinear_corner_bounds(vlo, vhi, ilo, ihi)
    corners = np.array([vlo * ilo, vlo * ihi, vhi * ilo, vhi * ihi])
    assert np.all(np.isclose(corners.max(axis=0), rmax)) and np.all(np.isclose(corners.min(axis=0), rmin))
    # any strictly smaller max (larger min) misses a corner
    assert np.all(corners.max(axis=0) > rmax - 1e-9) and np.all(corners.min(axis=0) < rmin + 1e-9)
    cx = p.c * split_rng.uniform(0, 1, p.k)
    cy = p.c - cx
    for lx in (0, 1):
        for ly in (0, 1):
            lhs = lx * (vlo - vhi) + ly * (ilo - ihi)
            rhs = (lx * cx + ly * cy) * (rmin - rmax)
            assert np.all(lhs <= rhs + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_corner_tightness_and_width_inequality(seed):
    rng = np.random.default_rng(seed)
    p = random_ep_problem(rng)
    corner_and_width_checks(p, solve_branch_ep(p).x, rng)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(1.0, 3.0))
def test_enlarging_the_box_never_hurts(seed, grow):
    p = random_ep_problem(np.random.default_rng(seed))
    big = BranchEpProblem(p.v_lo0 * grow, p.v_hi0 * grow, p.i_lo0 * grow, p.i_hi0 * grow, p.c, p.H)
    assert solve_branch_ep(big).objective <= solve_branch_ep(p).objective + 1e-12


def anchors(net, rng, n):
    out = []
    while len(out) < n:
        u = rng.uniform(net.u_min, net.u_max)
        res = newton_solve(net, u)
        if res.converged:
            out.append(res.point)
    return out


@pytest.mark.parametrize("net", [six_bus(), ieee33()], ids=["six-bus", "ieee33"])
def test_assembled_box_meets_width_condition(net):
    rng = np.random.default_rng(2)
    for a in anchors(net, rng, 5):
        m = build_fixed_point_model(net, a, participation(net, a.u))
        ep = solve_ep(net, m)
        assert ep.condition_holds
        assert check_brouwer_condition(m, ep.box, ep.Rmin, ep.Rmax)[0]
        assert np.all(ep.box.P_lo == 0) and np.all(ep.box.Q_hi == 0)
        v_lo0, v_hi0, i_lo0, i_hi0 = outer_box(net, m)
        assert np.all(ep.box.V_lo >= v_lo0 - 1e-15) and np.all(ep.box.V_hi <= v_hi0 + 1e-15)
        assert np.all(ep.box.I_lo >= i_lo0 - 1e-15) and np.all(ep.box.I_hi <= i_hi0 + 1e-15)


def test_anchor_at_voltage_limit_collapses_that_direction():
    net = six_bus()
    a = newton_solve(net, net.u_nominal).point
    d = network_to_dict(net)
    d["nodes"][3]["v_max"] = float(a.V[3])
    tight = network_from_dict(d)
    m = build_fixed_point_model(tight, a, participation(tight, a.u))
    ep = solve_ep(tight, m)
    k = list(tight.nonroot).index(3)
    assert ep.box.V_hi[k] == 0.0
    assert ep.condition_holds


def test_random_network_anchors():
    rng = np.random.default_rng(9)
    for _ in range(10):
        net = random_network(rng)
        a = anchors(net, rng, 1)[0]
        m = build_fixed_point_model(net, a, participation(net, a.u))
        ep = solve_ep(net, m)
        assert check_brouwer_condition(m, ep.box, ep.Rmin, ep.Rmax)[0]
        assert ep.objective <= 0
