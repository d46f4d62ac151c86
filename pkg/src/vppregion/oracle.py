"""Independent reference computations.

``brute_force_region`` marks cells of a PCC grid as feasible when it finds a
witness: a solved, limit-clean AC operating point whose PCC power lies in
the cell. Witnesses come from

* a forward pass: solve with candidate control vectors and mark the cell
  that the resulting PCC point falls in;
* a per-cell search: a few rounds of a linearised LP that aims the PCC at
  the cell centre with maximum voltage margin, each followed by a fixed-PCC
  Newton correction;
* for networks with at most four flexible controls, a control grid used both
  in the forward pass and as Newton starts at every cell.

The result is conservative: cells without a witness are reported infeasible.
"""
from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .epsolver import BranchEpProblem, ep_grid_oracle  # noqa: F401  (re-exported oracle)
from .fixedpoint import flexible_controls
from .geometry import union_coverage
from .netmodel import (Network, OperatingPoint, control_incidence, jacobian_f, limit_check,
                       newton_solve, participation, pcc_incidence, _residual)
from .optim import LpProblem, OPTIMAL, SolverError, lp_solve

log = logging.getLogger(__name__)

WITNESS_TOL = 1e-6
CLEAN_TOL = 1e-9


class BudgetExceededError(RuntimeError):
    """The requested grid would need more solves than the budget allows."""


@dataclass(eq=False)
class FeasibleGrid:
    p: np.ndarray
    q: np.ndarray
    feasible: np.ndarray  # (len(p), len(q)) bool
    witnesses: dict = field(default_factory=dict)  # (i, j) -> (u, pcc, x)

    @property
    def step(self):
        sp = self.p[1] - self.p[0] if len(self.p) > 1 else 0.0
        sq = self.q[1] - self.q[0] if len(self.q) > 1 else 0.0
        return sp, sq

    def cell_of(self, pcc):
        sp, sq = self.step
        i = int(np.rint((pcc[0] - self.p[0]) / sp)) if sp else 0
        j = int(np.rint((pcc[1] - self.q[0]) / sq)) if sq else 0
        if 0 <= i < len(self.p) and 0 <= j < len(self.q):
            return i, j
        return None

    def centers(self, feasible_only=True):
        P, Q = np.meshgrid(self.p, self.q, indexing="ij")
        mask = self.feasible if feasible_only else np.ones_like(self.feasible)
        return np.column_stack([P[mask], Q[mask]])

    @property
    def count(self):
        return int(self.feasible.sum())

    def to_dict(self):
        return {"p": self.p.tolist(), "q": self.q.tolist(),
                "feasible": self.feasible.astype(int).tolist(),
                "witnesses": [{"cell": list(k), "u": w[0].tolist(), "pcc": w[1].tolist(),
                               "x": w[2].tolist()} for k, w in sorted(self.witnesses.items())]}

    @classmethod
    def from_dict(cls, d):
        w = {tuple(r["cell"]): (np.asarray(r["u"]), np.asarray(r["pcc"]), np.asarray(r["x"]))
             for r in d.get("witnesses", [])}
        return cls(np.asarray(d["p"]), np.asarray(d["q"]), np.asarray(d["feasible"], bool), w)


def threads():
    try:
        return max(1, int(os.environ.get("VPPREGION_THREADS", "1")))
    except ValueError:
        return 1


def check_witness(net: Network, u, pcc, x, tol=WITNESS_TOL):
    """Residual and limits of a stored witness."""
    pt = OperatingPoint.from_state(net, x, u, pcc)
    res = np.max(np.abs(_residual(net, x, u, pcc)))
    return res <= tol and limit_check(net, pt, CLEAN_TOL).clean(CLEAN_TOL)


def verify_point(net: Network, region, upcc):
    """AC check of ``upcc`` against a SubRegion or an Atlas (first containing sub-region)."""
    from .explorer import Atlas, OutsideRegionError, verify_point as verify_in
    if not isinstance(region, Atlas):
        return verify_in(net, region, upcc)
    for sr in region.subregions:
        if sr.polygon.contains(upcc):
            return verify_in(net, sr, upcc)
    raise OutsideRegionError(f"{np.asarray(upcc)} is outside every sub-region")


def _clean(net, res):
    return res.converged and limit_check(net, res.point, CLEAN_TOL).clean(CLEAN_TOL)


def linearized_target(net: Network, point: OperatingPoint, target, v_margin_cap=0.02):
    """Controls whose first-order response puts the PCC power at ``target``.

    Maximises a common margin to the voltage and current limits. Returns
    (u, x_pred) or None when the linearised problem is infeasible.
    """
    L, N = net.n_branches, net.n_nodes
    keep = np.delete(np.arange(net.n_x), 2 * L + net.root)
    flex = flexible_controls(net)
    J = jacobian_f(net, point)[:, keep]
    K1 = pcc_incidence(net)
    K2 = control_incidence(net)[:, flex]
    r0 = _residual(net, point.x, point.u, point.pcc)
    nx, nf = keep.size, flex.size
    # variables: dx (nx), du (nf), s
    n = nx + nf + 1
    A_eq = np.hstack([J, -K2, np.zeros((net.n_e, 1))])
    b_eq = K1 @ (np.asarray(target) - point.pcc) - r0
    x0 = point.x[keep]
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[nx:nx + nf] = net.u_min[flex] - point.u[flex]
    ub[nx:nx + nf] = net.u_max[flex] - point.u[flex]
    lb[-1], ub[-1] = 0.0, v_margin_cap
    # V rows: V_min + s <= V <= V_max - s; I rows: I <= I_max (1 - s), I >= I_min
    iv = np.arange(2 * L, 2 * L + N - 1)
    ii = np.arange(2 * L + N - 1, nx)
    vlo = np.delete(net.v_min, net.root)
    vhi = np.delete(net.v_max, net.root)
    rows, rhs = [], []
    for idx, lo, hi, w_hi, w_lo in ((iv, vlo, vhi, np.ones(N - 1), np.ones(N - 1)),
                                    (ii, net.i_min, net.i_max, net.i_max, np.zeros(L))):
        k = idx.size
        E = np.zeros((k, n))
        E[np.arange(k), idx] = 1.0
        E[:, -1] = w_hi
        rows.append(E)
        rhs.append(hi - x0[idx])
        E2 = np.zeros((k, n))
        E2[np.arange(k), idx] = -1.0
        E2[:, -1] = w_lo
        rows.append(E2)
        rhs.append(x0[idx] - lo)
    c = np.zeros(n)
    c[-1] = -1.0
    try:
        res = lp_solve(LpProblem(c, np.vstack(rows), np.concatenate(rhs), A_eq, b_eq, lb, ub))
    except SolverError:
        return None
    if res.status != OPTIMAL:
        return None
    u = point.u.copy()
    u[flex] += res.x[nx:nx + nf]
    x = point.x.copy()
    x[keep] += res.x[:nx]
    return u, x


def _cell_search(net, center, half, reference, grid_us, rounds):
    """Try to find a witness for one cell. Returns (u, pcc, x) or None."""
    point = reference
    for _ in range(rounds):
        sug = linearized_target(net, point, center)
        if sug is None:
            break
        u, x = sug
        init = OperatingPoint.from_state(net, x, u, center)
        res = newton_solve(net, u, mode="fixed", pcc=center, init=init,
                           balancing=participation(net, u))
        if _clean(net, res):
            return res.point.u, res.point.pcc, res.point.x
        if not res.converged:
            break
        point = res.point
    for u in grid_us:
        D = participation(net, u)
        if np.abs(D).sum() == 0:
            continue
        res = newton_solve(net, u, mode="fixed", pcc=center, balancing=D)
        if _clean(net, res) and np.all(np.abs(res.point.pcc - center) <= half):
            return res.point.u, res.point.pcc, res.point.x
    return None


def control_grid_points(net: Network, density):
    flex = flexible_controls(net)
    if flex.size == 0:
        return [net.u_nominal.copy()]
    axes = [np.linspace(net.u_min[c], net.u_max[c], density) for c in flex]
    out = []
    for combo in itertools.product(*axes):
        u = net.u_nominal.copy()
        u[flex] = combo
        out.append(u)
    return out


def brute_force_region(net: Network, p_range, q_range, resolution=51, control_grid=None,
                       budget=2_000_000, rounds=4, reference=None) -> FeasibleGrid:
    """Witness-verified feasibility of every cell of a PCC grid."""
    p = np.linspace(p_range[0], p_range[1], resolution)
    q = np.linspace(q_range[0], q_range[1], resolution)
    flex = flexible_controls(net)
    if control_grid is None:
        control_grid = 5 if flex.size <= 4 else 0
    grid_us = control_grid_points(net, control_grid) if control_grid else []
    cells = resolution * resolution
    estimate = len(grid_us) + 1 + cells * (rounds + len(grid_us))
    if estimate > budget:
        raise BudgetExceededError(f"estimated {estimate} solves exceeds budget {budget}")
    feas = np.zeros((resolution, resolution), dtype=bool)
    wit = {}
    sp = p[1] - p[0] if resolution > 1 else 1.0
    sq = q[1] - q[0] if resolution > 1 else 1.0
    half = np.array([sp, sq]) / 2 * (1 + 1e-12)
    fg = FeasibleGrid(p, q, feas, wit)
    if reference is None:
        ref = newton_solve(net, net.u_nominal)
        reference = ref.point if ref.converged else None
    # forward pass
    for u in [net.u_nominal] + grid_us:
        res = newton_solve(net, u)
        if not _clean(net, res):
            continue
        cell = fg.cell_of(res.point.pcc)
        if cell is not None and not feas[cell]:
            feas[cell] = True
            wit[cell] = (res.point.u, res.point.pcc, res.point.x)
    todo = [(i, j) for i in range(resolution) for j in range(resolution) if not feas[i, j]]

    def work(ij):
        if reference is None:
            return None
        i, j = ij
        return _cell_search(net, np.array([p[i], q[j]]), half, reference, grid_us, rounds)

    n_thr = threads()
    if n_thr > 1:
        with ThreadPoolExecutor(n_thr) as ex:
            results = list(ex.map(work, todo))
    else:
        results = [work(ij) for ij in todo]
    for ij, w in zip(todo, results):
        if w is not None:
            feas[ij] = True
            wit[ij] = w
    return fg


def default_ranges(net: Network, pad=0.1):
    """PCC box around the loss-free extremes, padded by ``pad`` of its span."""
    from .explorer import lindistflow_extreme
    pts = []
    for d in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        u = lindistflow_extreme(net, d)
        if u is None:
            continue
        res = newton_solve(net, u)
        if res.converged:
            pts.append(res.point.pcc)
    if not pts:
        pts = [newton_solve(net, net.u_nominal).point.pcc]
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-3)
    return (lo[0] - pad * span[0], hi[0] + pad * span[0]), (lo[1] - pad * span[1],
                                                           hi[1] + pad * span[1])


def coverage(grid: FeasibleGrid, polygons, tol=1e-9):
    """Fraction of verified-feasible cell centres inside the union of ``polygons``."""
    return union_coverage(polygons, grid, tol)


def export_grid_csv(grid: FeasibleGrid, path):
    with open(path, "w") as fh:
        fh.write("p_pcc,q_pcc,status\n")
        for i, pv in enumerate(grid.p):
            for j, qv in enumerate(grid.q):
                status = "verified-feasible" if grid.feasible[i, j] else "not-verified"
                fh.write(f"{pv:.12g},{qv:.12g},{status}\n")
