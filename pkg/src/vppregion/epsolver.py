"""Box-width optimisation for the voltage and current rows.

For every start node the V box of that node and the I boxes of the branches
leaving it are chosen to minimise::

    (V_lo - V_hi) * w_V + sum_l [(I_lo_l - I_hi_l) + c_l * (Rmax_l - Rmin_l)] / H_l

where ``Rmin_l, Rmax_l`` bound ``V * I_l`` over the box and are replaced by the
corner products, and ``w_V`` is the mean of ``1 / H_l``. With one branch this is
the usual per-branch problem. The objective is convex and piecewise linear
in each coordinate separately, so exact coordinate descent over breakpoints
is used from several starts (a coarse grid, the full box, zero and random
points).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import (BrouwerBox, FixedPointModel, bilinear_corner_bounds,
                         check_brouwer_condition, residual_bounds)
from .netmodel import Network

log = logging.getLogger(__name__)


@dataclass
class BranchEpProblem:
    """One start node: shared V bounds, per-branch I bounds, weights c and H."""

    v_lo0: float
    v_hi0: float
    i_lo0: np.ndarray
    i_hi0: np.ndarray
    c: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        self.i_lo0 = np.atleast_1d(np.asarray(self.i_lo0, float))
        self.i_hi0 = np.atleast_1d(np.asarray(self.i_hi0, float))
        self.c = np.atleast_1d(np.asarray(self.c, float))
        self.H = np.atleast_1d(np.asarray(self.H, float))
        if not (self.v_lo0 <= self.v_hi0 and np.all(self.i_lo0 <= self.i_hi0)):
            raise ValueError("outer box bounds are inverted")
        if np.any(self.H <= 0):
            raise ValueError("H must be positive")

    @property
    def k(self):
        return self.i_lo0.size

    @property
    def n_vars(self):
        return 2 + 2 * self.k

    @property
    def bounds(self):
        lo = np.concatenate([[self.v_lo0, self.v_lo0], np.repeat(self.i_lo0, 1),
                             self.i_lo0])
        hi = np.concatenate([[self.v_hi0, self.v_hi0], self.i_hi0, self.i_hi0])
        return lo, hi

    def unpack(self, x):
        x = np.asarray(x, float)
        return x[..., 0], x[..., 1], x[..., 2:2 + self.k], x[..., 2 + self.k:]

    def objective(self, x):
        """Vectorised over leading axes of ``x`` (layout: v_lo, v_hi, i_lo[k], i_hi[k])."""
        vlo, vhi, ilo, ihi = self.unpack(x)
        vlo, vhi = vlo[..., None], vhi[..., None]
        rmin, rmax = bilinear_corner_bounds(vlo, vhi, ilo, ihi)
        wv = np.mean(1.0 / self.H)
        terms = ((ilo - ihi) + self.c * (rmax - rmin)) / self.H
        return (vlo[..., 0] - vhi[..., 0]) * wv + terms.sum(axis=-1)

    def feasible(self, x, tol=1e-12):
        vlo, vhi, ilo, ihi = self.unpack(x)
        return bool(self.v_lo0 - tol <= vlo <= vhi + tol and vhi <= self.v_hi0 + tol
                    and np.all(self.i_lo0 - tol <= ilo) and np.all(ilo <= ihi + tol)
                    and np.all(ihi <= self.i_hi0 + tol))

    def lipschitz(self):
        """Bound on |df/dx_j| over the outer box (for the grid-oracle comparison)."""
        vmax = max(abs(self.v_lo0), abs(self.v_hi0))
        imax = np.maximum(np.abs(self.i_lo0), np.abs(self.i_hi0))
        wv = np.mean(1.0 / self.H)
        gv = wv + np.sum(2 * self.c * imax / self.H)
        gi = np.max((1 + 2 * self.c * vmax) / self.H)
        return float(max(gv, gi))


def _coord_bounds(prob, x, j):
    k = prob.k
    if j == 0:
        return prob.v_lo0, x[1]
    if j == 1:
        return x[0], prob.v_hi0
    if j < 2 + k:
        l = j - 2
        return prob.i_lo0[l], x[2 + k + l]
    l = j - 2 - k
    return x[2 + l], prob.i_hi0[l]


def _corner_lines(prob, x, j):
    """Corner products of every branch as affine functions of coordinate j."""
    x0 = x.copy()
    x1 = x.copy()
    x0[j] = 0.0
    x1[j] = 1.0

    def corners(xx):
        vlo, vhi, ilo, ihi = prob.unpack(xx)
        return np.stack([vlo * ilo, vlo * ihi, vhi * ilo, vhi * ihi])  # (4, k)

    c0 = corners(x0)
    c1 = corners(x1)
    return c1 - c0, c0


def _coordinate_min(prob, x, j):
    lo, hi = _coord_bounds(prob, x, j)
    if hi - lo <= 0:
        return lo
    slope, icpt = _corner_lines(prob, x, j)
    cand = [lo, hi]
    for a, b in itertools.combinations(range(4), 2):
        ds = slope[a] - slope[b]
        ok = np.abs(ds) > 1e-300
        t = -(icpt[a][ok] - icpt[b][ok]) / ds[ok]
        cand.extend(t[(t > lo) & (t < hi)].tolist())
    cand = np.unique(np.asarray(cand))
    xs = np.repeat(x[None, :], cand.size, axis=0)
    xs[:, j] = cand
    f = prob.objective(xs)
    return float(cand[int(np.argmin(f))])


def _descend(prob, x, max_sweeps=500, tol=1e-15):
    x = x.copy()
    f = float(prob.objective(x))
    for _ in range(max_sweeps):
        f_old = f
        for j in range(prob.n_vars):
            x[j] = _coordinate_min(prob, x, j)
        f = float(prob.objective(x))
        if f_old - f <= tol * max(1.0, abs(f_old)):
            break
    return x, f


def _grid_points(prob, n):
    """Feasible points of an n-per-axis grid over every variable pair."""
    lo, hi = prob.bounds
    axes = []
    for j in range(prob.n_vars):
        axes.append(np.linspace(lo[j], hi[j], n))
    if prob.n_vars > 6:
        return np.zeros((0, prob.n_vars))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, prob.n_vars)
    vlo, vhi, ilo, ihi = prob.unpack(mesh)
    ok = (vlo <= vhi) & np.all(ilo <= ihi, axis=-1)
    return mesh[ok]


@dataclass
class BranchEpSolution:
    x: np.ndarray
    objective: float
    starts: int = 0


def solve_branch_ep(prob: BranchEpProblem, rng=None, n_random=8, grid=7) -> BranchEpSolution:
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = prob.bounds
    k = prob.k
    full = np.concatenate([[prob.v_lo0, prob.v_hi0], prob.i_lo0, prob.i_hi0])
    starts = [full, np.zeros(prob.n_vars)]
    # the two boxes with zero remainder range: V collapsed, or I collapsed
    v_only = full.copy()
    v_only[2:] = 0.0
    i_only = full.copy()
    i_only[:2] = 0.0
    starts += [v_only, i_only]
    for _ in range(n_random):
        v = np.sort(rng.uniform(prob.v_lo0, prob.v_hi0, 2))
        il = rng.uniform(prob.i_lo0, prob.i_hi0, (2, k))
        starts.append(np.concatenate([v, il.min(axis=0), il.max(axis=0)]))
    pts = _grid_points(prob, grid)
    if len(pts):
        f = prob.objective(pts)
        for idx in np.argsort(f)[:4]:
            starts.append(pts[idx])
    best_x, best_f = None, np.inf
    for s in starts:
        x, f = _descend(prob, np.clip(s, lo, hi))
        if f < best_f - 1e-15:
            best_x, best_f = x, f
    # never worse than the remainder-free boxes
    for s in (v_only, i_only, np.zeros(prob.n_vars)):
        f = float(prob.objective(s))
        if f < best_f:
            best_x, best_f = s.copy(), f
    best_x, best_f = _collapse_polish(prob, best_x, best_f)
    return BranchEpSolution(best_x, float(best_f), len(starts))


def _collapse_moves(prob, x):
    """Copies of x with the V range or one branch's I range shrunk to zero."""
    k = prob.k
    out = []
    y = x.copy()
    y[:2] = 0.0
    out.append(y)
    for l in range(k):
        y = x.copy()
        y[2 + l] = y[2 + k + l] = 0.0
        out.append(y)
    return out


def _collapse_polish(prob, x, f, rounds=20):
    """Coordinate descent moves one bound at a time and can miss collapsing a whole
    range; try those joint moves until none improves."""
    for _ in range(rounds):
        improved = False
        for y in _collapse_moves(prob, x):
            fy = float(prob.objective(y))
            if fy < f - 1e-15 * max(1.0, abs(f)):
                x, f = _descend(prob, y)
                improved = True
                break
        if not improved:
            break
    return x, f


def ep_grid_oracle(prob: BranchEpProblem, resolution=41):
    """Best objective over a uniform grid (brute force, one branch or small groups)."""
    if resolution > 61:
        raise ValueError("grid oracle resolution is limited to 61 per axis")
    if prob.n_vars > 4:
        raise ValueError("grid oracle is limited to a single branch")
    best_f, best_x = np.inf, None
    lo, hi = prob.bounds
    ax = [np.linspace(lo[j], hi[j], resolution) for j in range(4)]
    # loop over the first axis to bound memory
    for a in ax[0]:
        mesh = np.stack(np.meshgrid([a], ax[1], ax[2], ax[3], indexing="ij"), -1).reshape(-1, 4)
        ok = (mesh[:, 0] <= mesh[:, 1]) & (mesh[:, 2] <= mesh[:, 3])
        if not np.any(ok):
            continue
        f = prob.objective(mesh[ok])
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_f, best_x = float(f[i]), mesh[ok][i]
    steps = [(hi[j] - lo[j]) / (resolution - 1) for j in range(4)]
    return best_f, best_x, max(steps)


@dataclass
class EpResult:
    box: BrouwerBox
    Rmin: np.ndarray
    Rmax: np.ndarray
    objective: float
    group_objectives: dict = field(default_factory=dict)
    scale: float = 1.0
    condition_holds: bool = True


def outer_box(net: Network, model: FixedPointModel):
    """Limit room around the anchor: (V_lo0, V_hi0) per non-root node, (I_lo0, I_hi0) per branch."""
    a = model.anchor
    nr = net.nonroot
    v_lo0 = np.minimum(0.0, net.v_min[nr] - a.V[nr])
    v_hi0 = np.maximum(0.0, net.v_max[nr] - a.V[nr])
    i_hi0 = np.maximum(0.0, net.i_max - a.I)
    i_lo0 = np.minimum(0.0, net.i_min - a.I)
    # I = (P^2 + Q^2) / V >= 0 at every solution, so a zero lower limit can never be
    # violated and the box may extend below it symmetrically
    free = net.i_min <= 0
    i_lo0 = np.where(free, np.minimum(i_lo0, -i_hi0), i_lo0)
    return v_lo0, v_hi0, i_lo0, i_hi0


def build_ep_problems(net: Network, model: FixedPointModel, H_choice="current"):
    """One problem per start node that is not the root."""
    v_lo0, v_hi0, i_lo0, i_hi0 = outer_box(net, model)
    L = net.n_branches
    M = model.M_plus
    c = M.sum(axis=0)  # column sums over the V and I rows
    H_all = model.H
    H = H_all[L:] if H_choice == "current" else H_all[:L]
    H = np.where(H > 1e-300, H, 1.0)
    pos = np.full(net.n_nodes, -1)
    pos[net.nonroot] = np.arange(net.n_nodes - 1)
    probs = {}
    for node in range(net.n_nodes):
        kids = list(net.children[node])
        if node == net.root or not kids:
            continue
        k = pos[node]
        probs[node] = (np.array(kids), BranchEpProblem(v_lo0[k], v_hi0[k], i_lo0[kids],
                                                       i_hi0[kids], c[kids], H[kids]))
    return probs, (v_lo0, v_hi0, i_lo0, i_hi0)


def solve_ep(net: Network, model: FixedPointModel, seed=0, repair=True, bisect_steps=40) -> EpResult:
    """Solve the decoupled box problems and assemble the V/I box.

    If the assembled box violates the width condition, it is scaled towards
    zero (bisection on the scale) until the condition holds; the scale is
    reported in the result.
    """
    rng = np.random.default_rng(seed)
    probs, (v_lo0, v_hi0, i_lo0, i_hi0) = build_ep_problems(net, model)
    pos = np.full(net.n_nodes, -1)
    pos[net.nonroot] = np.arange(net.n_nodes - 1)
    # defaults: leaves keep their full V room, root branches their full I room
    V_lo, V_hi = v_lo0.copy(), v_hi0.copy()
    I_lo, I_hi = i_lo0.copy(), i_hi0.copy()
    objs = {}
    for node, (kids, prob) in probs.items():
        sol = solve_branch_ep(prob, rng)
        vlo, vhi, ilo, ihi = prob.unpack(sol.x)
        V_lo[pos[node]], V_hi[pos[node]] = vlo, vhi
        I_lo[kids], I_hi[kids] = ilo, ihi
        objs[net.node_ids[node]] = sol.objective
    box = BrouwerBox(V_lo, V_hi, I_lo, I_hi)
    Rmin, Rmax = residual_bounds(net, box)
    holds, _ = check_brouwer_condition(model, box, Rmin, Rmax)
    scale = 1.0
    if not holds and repair:
        lo, hi = 0.0, 1.0
        for _ in range(bisect_steps):
            mid = 0.5 * (lo + hi)
            b = box.scaled_vi(mid)
            r0, r1 = residual_bounds(net, b)
            if check_brouwer_condition(model, b, r0, r1)[0]:
                lo = mid
            else:
                hi = mid
        scale = lo
        box = box.scaled_vi(scale)
        Rmin, Rmax = residual_bounds(net, box)
        holds = check_brouwer_condition(model, box, Rmin, Rmax)[0]
        log.info("width condition repaired by scaling the V/I box to %.4g", scale)
    return EpResult(box, Rmin, Rmax, float(sum(objs.values())), objs, scale, holds)
