"""Linear and mixed-integer linear programming kernels.

Two LP backends are available. ``method="highs"`` delegates to scipy's HiGHS
interface and is the default for production-sized problems. ``method="simplex"``
is a small dense two-phase tableau simplex with Bland's anti-cycling rule; it
is deterministic and is used by the tests and for tiny problems.

The MILP solver is a best-bound branch-and-bound over binary variables that
calls ``lp_solve`` at every node.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

MAX_BINARIES = 64


class SolverError(RuntimeError):
    """Raised when a solver cannot return a usable answer."""


@dataclass
class LpProblem:
    """min c @ x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lb <= x <= ub."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.A_ub is None:
            self.A_ub = np.zeros((0, n))
            self.b_ub = np.zeros(0)
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        self.A_ub = np.atleast_2d(np.asarray(self.A_ub, dtype=float)).reshape(-1, n)
        self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float)).reshape(-1, n)
        self.b_ub = np.asarray(self.b_ub, dtype=float).ravel()
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise ValueError("constraint matrix and right-hand side sizes differ")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bound vectors must match the number of variables")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self):
        return self.c.size


@dataclass
class LpResult:
    status: str
    x: np.ndarray | None = None
    value: float = np.nan
    # dual multipliers: y_ub <= 0 for "<=" rows, y_eq free
    y_ub: np.ndarray | None = None
    y_eq: np.ndarray | None = None
    gap: float = np.nan
    iterations: int = 0

    @property
    def optimal(self):
        return self.status == OPTIMAL


def lp_solve(prob: LpProblem, method="highs", tol=1e-9) -> LpResult:
    """Solve an LP. Returns an LpResult whose status is optimal/infeasible/unbounded."""
    if method == "highs":
        return _solve_highs(prob)
    if method == "simplex":
        return _solve_simplex(prob, tol=tol)
    raise ValueError(f"unknown LP method {method!r}")


def _linprog(prob, **opts):
    bounds = [(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
              for lo, hi in zip(prob.lb, prob.ub)]
    return linprog(prob.c,
                   A_ub=prob.A_ub if prob.A_ub.shape[0] else None,
                   b_ub=prob.b_ub if prob.A_ub.shape[0] else None,
                   A_eq=prob.A_eq if prob.A_eq.shape[0] else None,
                   b_eq=prob.b_eq if prob.A_eq.shape[0] else None,
                   bounds=bounds, **opts)


def _solve_highs(prob, _probe=False):
    res = _linprog(prob, method="highs")
    if res.status == 4:
        # numerical trouble: retry with the dual simplex and no presolve
        res = _linprog(prob, method="highs-ds", options={"presolve": False})
    if res.status == 2:
        # presolve may report "infeasible" for an unbounded problem; probe with c = 0
        if not _probe and _solve_highs(LpProblem(np.zeros(prob.n), prob.A_ub, prob.b_ub, prob.A_eq,
                                                 prob.b_eq, prob.lb, prob.ub), True).optimal:
            return LpResult(UNBOUNDED, iterations=int(getattr(res, "nit", 0)))
        return LpResult(INFEASIBLE, iterations=int(getattr(res, "nit", 0)))
    if res.status == 3:
        return LpResult(UNBOUNDED, iterations=int(getattr(res, "nit", 0)))
    if res.status != 0:
        raise SolverError(f"HiGHS failed: {res.message}")
    x = np.asarray(res.x, dtype=float)
    y_ub = np.asarray(res.ineqlin.marginals) if prob.A_ub.shape[0] else np.zeros(0)
    y_eq = np.asarray(res.eqlin.marginals) if prob.A_eq.shape[0] else np.zeros(0)
    gap = _duality_gap(prob, x, y_ub, y_eq,
                       np.asarray(res.lower.marginals), np.asarray(res.upper.marginals))
    return LpResult(OPTIMAL, x, float(prob.c @ x), y_ub, y_eq, gap, int(res.nit))


def _duality_gap(prob, x, y_ub, y_eq, z_lo, z_hi):
    """Primal minus dual objective, using finite bounds only."""
    dual = float(prob.b_ub @ y_ub + prob.b_eq @ y_eq)
    lo = np.where(np.isfinite(prob.lb), prob.lb, 0.0)
    hi = np.where(np.isfinite(prob.ub), prob.ub, 0.0)
    dual += float(lo @ z_lo + hi @ z_hi)
    return abs(float(prob.c @ x) - dual)


# ---------------------------------------------------------------------------
# dense tableau simplex (Bland's rule)

def _standard_form(prob):
    """Rewrite as min cs @ s, As s = bs, s >= 0 and return a map back to x.

    x = x0 + T @ s, with T built from shifted, mirrored and split columns.
    """
    n = prob.n
    cols = []  # list of (column in x, sign)
    x0 = np.zeros(n)
    extra_rows, extra_rhs = [], []
    for j in range(n):
        lo, hi = prob.lb[j], prob.ub[j]
        if np.isfinite(lo):
            x0[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_rows.append(len(cols) - 1)
                extra_rhs.append(hi - lo)
        elif np.isfinite(hi):
            x0[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    T = np.zeros((n, len(cols)))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s
    m_ub, m_eq = prob.A_ub.shape[0], prob.A_eq.shape[0]
    m_bd = len(extra_rows)
    n_s = len(cols)
    A_ub = prob.A_ub @ T
    b_ub = prob.b_ub - prob.A_ub @ x0
    A_eq = prob.A_eq @ T
    b_eq = prob.b_eq - prob.A_eq @ x0
    A_bd = np.zeros((m_bd, n_s))
    for r, k in enumerate(extra_rows):
        A_bd[r, k] = 1.0
    n_slack = m_ub + m_bd
    A = np.zeros((m_ub + m_bd + m_eq, n_s + n_slack))
    A[:m_ub, :n_s] = A_ub
    A[m_ub:m_ub + m_bd, :n_s] = A_bd
    A[m_ub + m_bd:, :n_s] = A_eq
    A[:n_slack, n_s:] = np.eye(n_slack)
    b = np.concatenate([b_ub, np.asarray(extra_rhs, float), b_eq])
    c = np.concatenate([prob.c @ T, np.zeros(n_slack)])
    return A, b, c, T, x0, n_s, (m_ub, m_bd, m_eq)


def _pivot(tab, r, k):
    tab[r] /= tab[r, k]
    col = tab[:, k].copy()
    col[r] = 0.0
    tab -= np.outer(col, tab[r])


def _simplex_phase(tab, basis, n_cols, tol, max_iter):
    """Run Bland's-rule simplex on a tableau whose last row is the cost row."""
    m = tab.shape[0] - 1
    it = 0
    while True:
        red = tab[-1, :n_cols]
        entering = np.flatnonzero(red < -tol)
        if entering.size == 0:
            return OPTIMAL, it
        k = int(entering[0])
        colk = tab[:m, k]
        pos = colk > tol
        if not np.any(pos):
            return UNBOUNDED, it
        ratios = np.full(m, np.inf)
        ratios[pos] = tab[:m, -1][pos] / colk[pos]
        best = ratios.min()
        tied = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        r = int(tied[np.argmin([basis[i] for i in tied])])
        _pivot(tab, r, k)
        basis[r] = k
        it += 1
        if it > max_iter:
            raise SolverError("simplex iteration limit reached")


def _solve_simplex(prob, tol=1e-9, max_iter=50_000):
    A, b, c, T, x0, n_s, (m_ub, m_bd, m_eq) = _standard_form(prob)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b = b.copy()
    b[neg] *= -1
    # phase 1 with one artificial per row
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[-1, :n] = -A.sum(axis=0)
    tab[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    _, it1 = _simplex_phase(tab, basis, n + m, tol, max_iter)
    if -tab[-1, -1] > 1e-7 * max(1.0, np.abs(b).max(initial=0.0)):
        return LpResult(INFEASIBLE, iterations=it1)
    # drive remaining artificials out of the basis where possible
    for r in range(m):
        if basis[r] >= n:
            nz = np.flatnonzero(np.abs(tab[r, :n]) > tol)
            if nz.size:
                _pivot(tab, r, int(nz[0]))
                basis[r] = int(nz[0])
    keep = [r for r in range(m) if basis[r] < n]
    tab2 = np.zeros((len(keep) + 1, n + 1))
    tab2[:-1, :n] = tab[keep, :n]
    tab2[:-1, -1] = tab[keep, -1]
    basis2 = [basis[r] for r in keep]
    tab2[-1, :n] = c
    for i, j in enumerate(basis2):
        tab2[-1] -= c[j] * tab2[i]
    status, it2 = _simplex_phase(tab2, basis2, n, tol, max_iter)
    if status == UNBOUNDED:
        return LpResult(UNBOUNDED, iterations=it1 + it2)
    s = np.zeros(n)
    for i, j in enumerate(basis2):
        s[j] = tab2[i, -1]
    x = x0 + T @ s[:n_s]
    # duals from the final basis: B^T y = c_B on the kept rows
    B = A[keep][:, basis2]
    y_keep = np.linalg.lstsq(B.T, c[basis2], rcond=None)[0]
    y = np.zeros(m)
    y[keep] = y_keep
    y[neg] *= -1
    b_orig = b.copy()
    b_orig[neg] *= -1
    A_orig = A.copy()
    A_orig[neg] *= -1
    reduced = c - A_orig.T @ y
    gap = abs(float(c @ s) - float(b_orig @ y))
    gap = max(gap, float(np.max(np.maximum(-reduced, 0.0), initial=0.0)))
    return LpResult(OPTIMAL, x, float(prob.c @ x), y[:m_ub], y[m_ub + m_bd:], gap,
                    it1 + it2)


# ---------------------------------------------------------------------------
# branch-and-bound MILP

@dataclass
class MilpResult:
    status: str
    x: np.ndarray | None = None
    value: float = np.nan
    nodes: int = 0
    bound: float = np.nan

    @property
    def optimal(self):
        return self.status == OPTIMAL


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    lb: np.ndarray = field(compare=False)
    ub: np.ndarray = field(compare=False)


def milp_solve(prob: LpProblem, binaries, method="highs", int_tol=1e-9,
               max_nodes=200_000) -> MilpResult:
    """Minimize ``prob`` with the variables in ``binaries`` restricted to {0, 1}.

    Best-bound node selection; branching on the most fractional binary with
    ties broken by the lowest index.
    """
    binaries = np.asarray(sorted(set(int(i) for i in binaries)), dtype=int)
    if binaries.size > MAX_BINARIES:
        raise ValueError(f"at most {MAX_BINARIES} binaries supported, got {binaries.size}")
    lb0 = prob.lb.copy()
    ub0 = prob.ub.copy()
    lb0[binaries] = np.maximum(lb0[binaries], 0.0)
    ub0[binaries] = np.minimum(ub0[binaries], 1.0)
    if np.any(lb0 > ub0):
        return MilpResult(INFEASIBLE)

    def relax(lb, ub):
        return lp_solve(LpProblem(prob.c, prob.A_ub, prob.b_ub, prob.A_eq, prob.b_eq, lb, ub),
                        method=method)

    best_x, best_val = None, np.inf
    root = relax(lb0, ub0)
    if root.status == UNBOUNDED:
        return MilpResult(UNBOUNDED)
    if root.status == INFEASIBLE:
        return MilpResult(INFEASIBLE, nodes=1)
    heap = [_Node(root.value, 0, lb0, ub0)]
    cache = {0: root}
    seq, nodes = 1, 0
    while heap:
        node = heapq.heappop(heap)
        if node.bound >= best_val - 1e-12 * max(1.0, abs(best_val)):
            continue
        res = cache.pop(node.seq)
        nodes += 1
        if nodes > max_nodes:
            raise SolverError("branch-and-bound node limit reached")
        xb = res.x[binaries]
        frac = np.abs(xb - np.round(xb))
        if frac.max(initial=0.0) <= int_tol:
            x = res.x.copy()
            x[binaries] = np.round(xb)
            if res.value < best_val:
                best_val, best_x = res.value, x
            continue
        # most fractional: distance to 0.5 smallest; argmin takes the lowest index on ties
        k = int(binaries[np.argmin(np.abs(xb - 0.5))])
        for fix in (0.0, 1.0):
            lb, ub = node.lb.copy(), node.ub.copy()
            lb[k] = ub[k] = fix
            child = relax(lb, ub)
            if child.status != OPTIMAL or child.value >= best_val:
                continue
            cache[seq] = child
            heapq.heappush(heap, _Node(child.value, seq, lb, ub))
            seq += 1
    if best_x is None:
        return MilpResult(INFEASIBLE, nodes=nodes)
    return MilpResult(OPTIMAL, best_x, float(best_val), nodes, float(best_val))
