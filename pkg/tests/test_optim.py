import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppregion.optim import (INFEASIBLE, OPTIMAL, UNBOUNDED, LpProblem, lp_solve, milp_solve)

METHODS = ("simplex", "highs")


@pytest.mark.parametrize("method", METHODS)
def test_lp_examples(method):
    r = lp_solve(LpProblem([1.0], lb=[1.0]), method=method)
    assert r.optimal and r.x[0] == pytest.approx(1.0) and r.value == pytest.approx(1.0)
    r = lp_solve(LpProblem([1.0], [[1.0]], [-1.0]), method=method)
    assert r.status == INFEASIBLE
    r = lp_solve(LpProblem([-1.0], [[-1.0]], [0.0]), method=method)
    assert r.status == UNBOUNDED


def test_bland_picks_first_vertex_on_tied_facet():
    r = lp_solve(LpProblem([-1.0, -1.0], [[1.0, 1.0]], [1.0]), method="simplex")
    assert r.value == pytest.approx(-1.0)
    assert r.x == pytest.approx([1.0, 0.0])


def random_lp(rng, n=None, m=None):
    n = n or int(rng.integers(2, 7))
    m = m or int(rng.integers(1, 8))
    A = rng.normal(size=(m, n))
    b = rng.uniform(-0.5, 2.0, m)
    k = int(rng.integers(0, 2))
    A_eq = rng.normal(size=(k, n))
    b_eq = A_eq @ rng.uniform(0, 1, n)
    lb = np.where(rng.random(n) < 0.3, -np.inf, rng.uniform(-1, 0, n))
    ub = np.where(rng.random(n) < 0.3, np.inf, rng.uniform(1, 3, n))
    return LpProblem(rng.normal(size=n), A, b, A_eq, b_eq, lb, ub)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 100_000))
def test_simplex_agrees_with_highs(seed):
    prob = random_lp(np.random.default_rng(seed))
    a = lp_solve(prob, method="simplex")
    b = lp_solve(prob, method="highs")
    assert a.status == b.status
    if a.optimal:
        assert a.value == pytest.approx(b.value, abs=1e-7 * max(1, abs(b.value)))
        assert np.all(prob.A_ub @ a.x <= prob.b_ub + 1e-7)
        assert a.gap <= 1e-8 * max(1.0, abs(a.value))


def test_simplex_is_deterministic():
    prob = random_lp(np.random.default_rng(3), 5, 6)
    a = lp_solve(prob, method="simplex")
    b = lp_solve(prob, method="simplex")
    assert np.array_equal(a.x, b.x)


def test_milp_examples():
    r = milp_solve(LpProblem([1.0], [[-1.0]], [-0.5], ub=[1.0]), [0])
    assert r.optimal and r.x[0] == pytest.approx(1.0)
    # choose one of two branches: k0 costs 3, k1 costs 2
    r = milp_solve(LpProblem([3.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[1.0]), [0, 1])
    assert r.optimal and r.x == pytest.approx([0.0, 1.0])
    r = milp_solve(LpProblem([1.0, 1.0], [[-1.0, 0], [0, -1.0]], [-0.5, -0.5],
                             A_eq=[[1.0, 1.0]], b_eq=[1.0]), [0, 1])
    assert r.status == INFEASIBLE


def test_milp_refuses_too_many_binaries():
    with pytest.raises(ValueError):
        milp_solve(LpProblem(np.zeros(65)), range(65))


def enumerate_milp(prob, binaries, method):
    best = None
    for bits in itertools.product((0.0, 1.0), repeat=len(binaries)):
        lb, ub = prob.lb.copy(), prob.ub.copy()
        lb[binaries] = ub[binaries] = bits
        r = lp_solve(LpProblem(prob.c, prob.A_ub, prob.b_ub, prob.A_eq, prob.b_eq, lb, ub),
                     method=method)
        if r.optimal and (best is None or r.value < best):
            best = r.value
    return best


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100_000))
def test_milp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    nb = int(rng.integers(1, 8))
    nc = int(rng.integers(1, 12))
    n = nb + nc
    m = int(rng.integers(1, 8))
    A = rng.normal(size=(m, n))
    b = rng.uniform(0.0, 2.0, m)
    lb = np.concatenate([np.zeros(nb), rng.uniform(-1, 0, nc)])
    ub = np.concatenate([np.ones(nb), rng.uniform(0.5, 2, nc)])
    prob = LpProblem(rng.normal(size=n), A, b, lb=lb, ub=ub)
    bins = np.arange(nb)
    r = milp_solve(prob, bins)
    ref = enumerate_milp(prob, bins, "highs")
    if ref is None:
        assert r.status == INFEASIBLE
    else:
        assert r.optimal and r.value == pytest.approx(ref, abs=1e-7)
        assert np.all(np.abs(r.x[bins] - np.round(r.x[bins])) <= 1e-9)


def test_milp_with_own_simplex():
    rng = np.random.default_rng(11)
    A = rng.normal(size=(4, 6))
    prob = LpProblem(rng.normal(size=6), A, rng.uniform(0.5, 2, 4), lb=np.zeros(6),
                     ub=np.ones(6))
    a = milp_solve(prob, [0, 1, 2], method="simplex")
    b = milp_solve(prob, [0, 1, 2], method="highs")
    assert a.status == b.status == OPTIMAL and a.value == pytest.approx(b.value)
