"""Sub-region construction, point verification and the exploration loop.

A sub-region is built around a solved, limit-clean anchor:

1. balancing participation and the fixed-point model at the anchor,
2. the per-start-node box problems for the V/I rows,
3. completion of the box with flow and balancing rows and a search over
   how much of it to keep (the candidate with the largest PCC footprint wins),
4. the polytope in (PCC deviation, control deviation) and its exact
   projection onto the PCC plane.

Exploration starts from a few anchors and then re-anchors at the polygon
vertices found in the previous round, skipping vertices that lie strictly
inside an existing sub-region.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .epsolver import solve_ep
from .fixedpoint import (BrouwerBox, CertifiedBox, FixedPointModel, SingularAnchorError,
                         build_fixed_point_model, build_omega_polytope, flexible_controls,
                         omega_from_bounds, search_box)
from .geometry import (EmptyRegionError, PccPolygon, Polytope, convex_hull_indices,
                       polygon_area, project_to_pcc, strictly_inside)
from .netmodel import (Network, OperatingPoint, flat_start, limit_check, newton_solve,
                       participation)
from .optim import LpProblem, OPTIMAL, lp_solve

log = logging.getLogger(__name__)

ANCHOR_TOL = 1e-9
VERIFY_TOL = 1e-6
TERMINATIONS = ("no-new-vertices", "max-subregions", "max-points", "max-iterations")


class AnchorError(RuntimeError):
    """No solved, limit-clean operating point at the requested PCC point."""


class OutsideRegionError(ValueError):
    """The PCC point is not inside the sub-region polygon."""


@dataclass
class ExploreConfig:
    strategy: str = "extremes"  # or "nominal"
    max_iterations: int = 3
    max_subregions: int = 50
    max_points: int = 400
    dedup_tol: float = 1e-4
    interior_tol: float = 1e-9
    start_margin: float = 0.02
    vertex_retreat: float = 0.01
    vertex_retries: int = 5
    seed: int = 0


@dataclass(eq=False)
class SubRegion:
    anchor: OperatingPoint
    balancing: np.ndarray
    cert: CertifiedBox | None
    polygon: PccPolygon
    iteration: int = 0
    parent: int | None = None
    ep_objective: float = 0.0
    ep_scale: float = 1.0
    _model: FixedPointModel | None = field(default=None, repr=False)

    @property
    def degenerate(self):
        return self.cert is None

    def model(self, net: Network) -> FixedPointModel:
        if self._model is None:
            self._model = build_fixed_point_model(net, self.anchor, self.balancing)
        return self._model

    def omega(self, net: Network) -> Polytope:
        m = self.model(net)
        flex = flexible_controls(net)
        A_state = np.hstack([m.F_pcc, m.F_u[:, flex]])
        c = self.cert
        return omega_from_bounds(A_state, c.b_min, c.b_max, c.ctrl_lo, c.ctrl_hi)

    def to_dict(self):
        a = self.anchor
        d = {"anchor": {k: getattr(a, k).tolist() for k in ("P", "Q", "V", "I", "u", "pcc")},
             "balancing": self.balancing.tolist(), "polygon": self.polygon.to_dict(),
             "iteration": self.iteration, "parent": self.parent,
             "ep_objective": self.ep_objective, "ep_scale": self.ep_scale, "cert": None}
        if self.cert is not None:
            c = self.cert
            d["cert"] = {"box": c.box.to_dict(), "Rmin": c.Rmin.tolist(), "Rmax": c.Rmax.tolist(),
                         "b_min": c.b_min.tolist(), "b_max": c.b_max.tolist(),
                         "ctrl_lo": c.ctrl_lo.tolist(), "ctrl_hi": c.ctrl_hi.tolist(),
                         "flow_scale": c.flow_scale, "vi_scale": c.vi_scale}
        return d

    @classmethod
    def from_dict(cls, d):
        a = d["anchor"]
        anchor = OperatingPoint(*(np.asarray(a[k], float) for k in ("P", "Q", "V", "I", "u", "pcc")))
        cert = None
        if d.get("cert") is not None:
            c = d["cert"]
            cert = CertifiedBox(BrouwerBox.from_dict(c["box"]), np.asarray(c["Rmin"]),
                                np.asarray(c["Rmax"]), np.asarray(c["b_min"]),
                                np.asarray(c["b_max"]), np.asarray(c["ctrl_lo"]),
                                np.asarray(c["ctrl_hi"]), c["flow_scale"], c["vi_scale"])
        return cls(anchor, np.asarray(d["balancing"], float), cert,
                   PccPolygon.from_dict(d["polygon"]), d["iteration"], d["parent"],
                   d["ep_objective"], d["ep_scale"])


@dataclass(eq=False)
class Atlas:
    network: str
    subregions: list
    termination: str = "no-new-vertices"
    iterations: int = 0
    visited: list = field(default_factory=list)
    log: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    cost_surfaces: dict = field(default_factory=dict)

    @property
    def polygons(self):
        return [s.polygon for s in self.subregions]

    def to_dict(self):
        return {"format": "vppregion-atlas", "version": __version__, "network": self.network,
                "termination": self.termination, "iterations": self.iterations,
                "config": self.config, "visited": [list(map(float, p)) for p in self.visited],
                "log": self.log, "subregions": [s.to_dict() for s in self.subregions],
                "cost_surfaces": self.cost_surfaces}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "vppregion-atlas":
            raise ValueError("not an atlas file")
        return cls(d["network"], [SubRegion.from_dict(s) for s in d["subregions"]],
                   d["termination"], d["iterations"], [np.asarray(p) for p in d["visited"]],
                   d.get("log", []), d.get("config", {}),
                   {int(k): v for k, v in d.get("cost_surfaces", {}).items()})


def save_atlas(atlas: Atlas, path):
    with open(path, "w") as fh:
        json.dump(atlas.to_dict(), fh)


def load_atlas(path) -> Atlas:
    with open(path) as fh:
        return Atlas.from_dict(json.load(fh))


def export_vertices_csv(atlas: Atlas, path):
    with open(path, "w") as fh:
        fh.write("subregion,vertex,p_pcc,q_pcc\n")
        for k, s in enumerate(atlas.subregions):
            for j, (p, q) in enumerate(s.polygon.vertices):
                fh.write(f"{k},{j},{p:.12g},{q:.12g}\n")


# ---------------------------------------------------------------------------
# anchors

def is_clean(net, pt, tol=ANCHOR_TOL):
    return limit_check(net, pt, tol).clean(tol)


def solve_anchor(net: Network, upcc, warm: OperatingPoint, balancing=None) -> OperatingPoint:
    """Fixed-PCC solve at ``upcc`` starting from ``warm``; raises AnchorError."""
    D = participation(net, warm.u) if balancing is None else balancing
    res = newton_solve(net, warm.u, mode="fixed", pcc=upcc, init=warm, balancing=D)
    if not res.converged:
        raise AnchorError(f"Newton did not converge at {np.round(upcc, 6)}")
    if not is_clean(net, res.point):
        raise AnchorError(f"limit violation at {np.round(upcc, 6)}")
    return res.point


def _footprint(model: FixedPointModel, n_dir=8):
    """Area of the hull of support points of the polytope in a few PCC directions."""
    def score(cb):
        try:
            poly = build_omega_polytope(model, cb)
        except ValueError:
            return -np.inf
        pts = []
        for a in 2 * np.pi * np.arange(n_dir) / n_dir:
            c = np.zeros(poly.dim)
            c[:2] = -np.array([np.cos(a), np.sin(a)])
            r = lp_solve(LpProblem(c, poly.A, poly.b, lb=np.full(poly.dim, -np.inf),
                                   ub=np.full(poly.dim, np.inf)))
            if r.status != OPTIMAL:
                return -np.inf
            pts.append(r.x[:2])
        pts = np.array(pts)
        area = abs(polygon_area(pts[convex_hull_indices(pts)]))
        # break ties between thin regions by their extent
        return area + 1e-6 * float(np.ptp(pts, axis=0).sum())
    return score


def construct_subregion(net: Network, anchor: OperatingPoint, iteration=0, parent=None,
                        seed=0) -> SubRegion:
    """Certified sub-region around a solved, limit-clean anchor."""
    if not is_clean(net, anchor):
        raise AnchorError("anchor violates limits")
    D = participation(net, anchor.u)
    try:
        model = build_fixed_point_model(net, anchor, D)
    except SingularAnchorError as exc:
        log.info("degenerate anchor (%s); sub-region is a single point", exc)
        return _point_region(anchor, D, iteration, parent)
    ep = solve_ep(net, model, seed=seed)
    from .epsolver import outer_box
    v_lo0, v_hi0, i_lo0, i_hi0 = outer_box(net, model)
    candidates = [ep.box, BrouwerBox(v_lo0, v_hi0, i_lo0, i_hi0)]
    cb = search_box(model, candidates, _footprint(model))
    if cb is None:
        log.info("no certifiable box at anchor %s", np.round(anchor.pcc, 6))
        return _point_region(anchor, D, iteration, parent, model)
    poly = build_omega_polytope(model, cb)
    try:
        polygon = project_to_pcc(poly, offset=anchor.pcc)
    except EmptyRegionError:
        return _point_region(anchor, D, iteration, parent, model)
    return SubRegion(anchor.copy(), D, cb, polygon, iteration, parent, ep.objective, ep.scale,
                     model)


def _point_region(anchor, D, iteration, parent, model=None):
    z = np.zeros((1, 2))
    poly = PccPolygon.from_vertices(anchor.pcc[None, :], liftings=z)
    return SubRegion(anchor.copy(), D, None, poly, iteration, parent, 0.0, 0.0, model)


# ---------------------------------------------------------------------------
# verification

@dataclass
class VerifyResult:
    passed: bool
    point: OperatingPoint | None
    reason: str = ""
    residual: float = np.nan
    violation: float = np.nan


def lift_point(net: Network, sr: SubRegion, upcc, slack=1e-9):
    """Control deviation certified for ``upcc`` (full n_u vector), or None."""
    poly = sr.omega(net)
    d = upcc - sr.anchor.pcc
    n = poly.dim
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[:2] = ub[:2] = d
    scale = max(1.0, float(np.abs(poly.b).max(initial=0.0)))
    res = lp_solve(LpProblem(np.zeros(n), poly.A, poly.b + slack * scale, lb=lb, ub=ub))
    if res.status != OPTIMAL:
        return None
    u_t = np.zeros(net.n_u)
    u_t[flexible_controls(net)] = res.x[2:]
    return u_t


def verify_point(net: Network, sr: SubRegion, upcc, tol=VERIFY_TOL) -> VerifyResult:
    """Recover controls for ``upcc`` from the sub-region and confirm with a full AC solve."""
    upcc = np.asarray(upcc, float)
    if not sr.polygon.contains(upcc):
        raise OutsideRegionError(f"{upcc} is outside the sub-region")
    if sr.degenerate:
        ok = np.max(np.abs(upcc - sr.anchor.pcc)) <= tol
        return VerifyResult(bool(ok), sr.anchor, "" if ok else "away from point region", 0.0, 0.0)
    model = sr.model(net)
    u_t = lift_point(net, sr, upcc)
    if u_t is None:
        return VerifyResult(False, None, "control lifting LP infeasible")
    z = model.linear_prediction(upcc - sr.anchor.pcc, u_t)
    dx, beta = model.state_perturbation(z)
    init = OperatingPoint.from_state(net, sr.anchor.x + dx, sr.anchor.u + u_t, upcc)
    res = newton_solve(net, sr.anchor.u + u_t, mode="fixed", pcc=upcc, init=init,
                       balancing=sr.balancing)
    rep = limit_check(net, res.point, tol)
    if not res.converged:
        return VerifyResult(False, res.point, "Newton did not converge", res.residual, rep.worst)
    if not rep.clean(tol):
        return VerifyResult(False, res.point, f"limit violation {rep.violated[:3]}", res.residual,
                            rep.worst)
    return VerifyResult(True, res.point, "", res.residual, rep.worst)


def sample_soundness(net: Network, sr: SubRegion, n, rng):
    """Verify ``n`` uniform samples of the polygon. Returns (passed, total, failures)."""
    from .geometry import sample_polygon
    pts = sample_polygon(sr.polygon, n, rng)
    fails = []
    total = 0
    for p in pts:
        # samples from the triangle fan sit inside up to rounding; a stray one is skipped, not passed
        if not sr.polygon.contains(p):
            continue
        total += 1
        r = verify_point(net, sr, p)
        if not r.passed:
            fails.append((p, r.reason))
    return total - len(fails), total, fails


# ---------------------------------------------------------------------------
# start points

def lindistflow_extreme(net: Network, direction, v_margin=0.0):
    """Controls that push the loss-free PCC power furthest along ``direction``."""
    L, N = net.n_branches, net.n_nodes
    flex = flexible_controls(net)
    nf = flex.size
    # variables: u_flex, P, Q, V (all nodes), pcc
    n = nf + 2 * L + N + 2
    iu, iP, iQ, iV, ipcc = 0, nf, nf + L, nf + 2 * L, nf + 2 * L + N
    active, sign = net.control_kind()
    node = net.control_node()
    u_fixed = net.u_nominal.copy()
    A, b = [], []
    for j in range(N):
        for q, (ioff, mask, r_or_x) in enumerate(((iP, active, net.r), (iQ, ~active, net.x))):
            row = np.zeros(n)
            rhs = 0.0
            l = net.incoming[j]
            if l >= 0:
                row[ioff + l] = 1.0
            else:
                row[ipcc + q] = 1.0
            for k in net.children[j]:
                row[ioff + k] -= 1.0
            # demand minus generation at j
            at = (node == j) & mask
            for c in np.flatnonzero(at):
                w = -sign[c]  # demand +1, generation -1
                if c in flex:
                    row[iu + int(np.searchsorted(flex, c))] -= w
                else:
                    rhs += w * u_fixed[c]
            A.append(row)
            b.append(rhs)
    for l in range(L):
        row = np.zeros(n)
        row[iV + net.br_to[l]] = 1.0
        row[iV + net.br_from[l]] = -1.0
        row[iP + l] = 2 * net.r[l]
        row[iQ + l] = 2 * net.x[l]
        A.append(row)
        b.append(0.0)
    row = np.zeros(n)
    row[iV + net.root] = 1.0
    A.append(row)
    b.append(net.v_root)
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[iu:iu + nf] = net.u_min[flex]
    ub[iu:iu + nf] = net.u_max[flex]
    lb[iV:iV + N] = net.v_min + v_margin
    ub[iV:iV + N] = net.v_max - v_margin
    c = np.zeros(n)
    c[ipcc:ipcc + 2] = -np.asarray(direction, float)
    res = lp_solve(LpProblem(c, A_eq=np.array(A), b_eq=np.array(b), lb=lb, ub=ub))
    if res.status != OPTIMAL:
        return None
    u = u_fixed.copy()
    u[flex] = res.x[iu:iu + nf]
    return u


def solve_clean(net: Network, u, toward, retreat=0.05, tries=10):
    """Free-PCC solve at ``u``, retreating towards ``toward`` until solved and clean."""
    for k in range(tries + 1):
        uu = toward + (1 - retreat * k) * (u - toward) if k else u
        res = newton_solve(net, uu)
        if res.converged and is_clean(net, res.point):
            return res.point
    return None


def select_start_points(net: Network, strategy="extremes", margin=0.02, dedup_tol=1e-4):
    """Solved, limit-clean operating points used as the first anchors."""
    u_nom = net.u_nominal
    nominal = solve_clean(net, u_nom, u_nom, tries=0)
    if strategy == "nominal":
        if nominal is None:
            raise AnchorError("nominal operating point is infeasible")
        return [nominal]
    if strategy != "extremes":
        raise ValueError(f"unknown start strategy {strategy!r}")
    out = []
    for d in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        u = lindistflow_extreme(net, d)
        if u is None:
            continue
        u = u_nom + (1 - margin) * (u - u_nom)
        pt = solve_clean(net, u, u_nom)
        if pt is None:
            continue
        if all(np.max(np.abs(pt.pcc - q.pcc)) > dedup_tol for q in out):
            out.append(pt)
    if not out:
        if nominal is None:
            raise AnchorError("no feasible start point found")
        out.append(nominal)
    return out


# ---------------------------------------------------------------------------
# exploration

def _farthest_order(points, reference):
    """Greedy farthest-point ordering, seeded by distance to ``reference`` points."""
    pts = [np.asarray(p, float) for p in points]
    ref = [np.asarray(r, float) for r in reference]
    order = []
    remaining = list(range(len(pts)))
    while remaining:
        if ref:
            d = [min(np.linalg.norm(pts[i] - r) for r in ref) for i in remaining]
        else:
            d = [0.0] * len(remaining)
        k = remaining[int(np.argmax(d))]
        order.append(k)
        ref.append(pts[k])
        remaining.remove(k)
    return order


def _vertex_anchor(net: Network, parent: SubRegion, vertex, lifting, cfg: ExploreConfig):
    """Solved anchor at a polygon vertex, retreating toward the parent anchor on failure."""
    model = parent.model(net)
    flex = flexible_controls(net)
    target = np.asarray(vertex, float)
    for k in range(cfg.vertex_retries + 1):
        p = parent.anchor.pcc + (1 - cfg.vertex_retreat * k) * (target - parent.anchor.pcc)
        if k == 0 and lifting is not None:
            u_t = np.zeros(net.n_u)
            u_t[flex] = lifting[2:]
        else:
            u_t = lift_point(net, parent, p)
            if u_t is None:
                continue
        z = model.linear_prediction(p - parent.anchor.pcc, u_t)
        dx, _ = model.state_perturbation(z)
        warm = OperatingPoint.from_state(net, parent.anchor.x + dx, parent.anchor.u + u_t, p)
        try:
            return solve_anchor(net, p, warm, parent.balancing)
        except AnchorError:
            continue
    return None


def explore(net: Network, config: ExploreConfig | None = None, starts=None, progress=None) -> Atlas:
    """Breadth-first exploration of sub-regions. ``progress(msg)`` receives per-iteration lines."""
    cfg = config or ExploreConfig()
    t0 = time.time()
    if starts is None:
        starts = select_start_points(net, cfg.strategy, cfg.start_margin, cfg.dedup_tol)
    regions: list[SubRegion] = []
    visited: list[np.ndarray] = []
    logs = []
    termination = "no-new-vertices"

    def emit(k, n_cand, n_acc):
        msg = f"iter {k}: {n_cand} candidates, {n_acc} accepted"
        logs.append({"iteration": k, "candidates": n_cand, "accepted": n_acc,
                     "elapsed": round(time.time() - t0, 3)})
        log.info(msg)
        if progress:
            progress(msg)

    def full():
        if len(regions) >= cfg.max_subregions:
            return "max-subregions"
        if len(visited) >= cfg.max_points:
            return "max-points"
        return None

    # round 1: the start anchors
    acc = 0
    for pt in starts:
        if full():
            break
        if any(np.max(np.abs(pt.pcc - v)) <= cfg.dedup_tol for v in visited):
            continue
        visited.append(pt.pcc.copy())
        try:
            regions.append(construct_subregion(net, pt, 1, None, cfg.seed))
            acc += 1
        except AnchorError as exc:
            log.info("start point skipped: %s", exc)
    emit(1, len(starts), acc)
    frontier = list(range(len(regions)))
    it = 1
    while True:
        reason = full()
        if reason:
            termination = reason
            break
        if it >= cfg.max_iterations:
            termination = "max-iterations"
            break
        it += 1
        cands = []
        for ri in frontier:
            sr = regions[ri]
            lifts = sr.polygon.liftings
            for j, v in enumerate(sr.polygon.vertices):
                if any(np.max(np.abs(v - q)) <= cfg.dedup_tol for q in visited):
                    continue
                if any(np.max(np.abs(v - c[1])) <= cfg.dedup_tol for c in cands):
                    continue
                if any(strictly_inside(o.polygon, v, cfg.interior_tol) for o in regions):
                    continue
                cands.append((ri, v, None if lifts is None else lifts[j]))
        if not cands:
            emit(it, 0, 0)
            termination = "no-new-vertices"
            break
        order = _farthest_order([c[1] for c in cands], [r.anchor.pcc for r in regions])
        new = []
        acc = 0
        for k in order:
            if full():
                break
            ri, v, lift = cands[k]
            # an earlier region of this round may already cover the vertex
            if any(strictly_inside(o.polygon, v, cfg.interior_tol) for o in regions):
                continue
            visited.append(np.asarray(v, float).copy())
            anchor = _vertex_anchor(net, regions[ri], v, lift, cfg)
            if anchor is None:
                continue
            try:
                sr = construct_subregion(net, anchor, it, ri, cfg.seed)
            except AnchorError:
                continue
            regions.append(sr)
            new.append(len(regions) - 1)
            acc += 1
        emit(it, len(cands), acc)
        frontier = new
        if not new:
            termination = full() or "no-new-vertices"
            break
    cfgd = asdict(cfg)
    return Atlas(net.name, regions, termination, it, visited, logs, cfgd)
