"""Transmission-level dispatch with VPP atlases.

Each VPP offers a list of sub-regions, each a polygon ``A_j u <= B_j`` in its
PCC plane with a convex piecewise-linear cost ``z_j(u) = max_k(a_k u + c_k)``.
The transmission operator runs a DC dispatch in which every VPP must place its
PCC point in exactly one of its sub-regions.

``solve_tp_enumerate`` fixes the region choice, solves one LP per assignment
and keeps the best. ``solve_etp`` solves the same problem as one MILP with
big-M relaxed region and cost rows and one binary per sub-region.

Sign conventions: ``u = (P, Q)`` is the power flowing from the transmission
bus into the VPP in the VPP's own per-unit base; at the transmission bus it
is a load of ``P * vpp_base / base_mva``. Costs are in currency per hour.

Transmission JSON layout::

    {"format": "vppregion-transmission", "base_mva": 100, "reference": 1,
     "buses": [{"id": 1, "demand": 0.5}, ...],
     "lines": [{"id": "l1", "from": 1, "to": 2, "susceptance": 10.0, "limit": 1.0}, ...],
     "units": [{"id": "g1", "bus": 1, "p": [0, 2], "cost": [[slope, intercept], ...]}, ...],
     "vpps": [{"id": "v1", "bus": 3, "base_mva": 10, "p_pcc": [lo, hi], "q_pcc": [lo, hi]}]}

A unit cost may also be a single number (a linear cost). ``limit`` may be
omitted or null for an unconstrained line.
"""
from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .fixedpoint import flexible_controls
from .geometry import PccPolygon
from .optim import INFEASIBLE, OPTIMAL, UNBOUNDED, LpProblem, lp_solve, milp_solve

log = logging.getLogger(__name__)

FORMAT = "vppregion-transmission"
ENUMERATION_GUARD = 10_000
BIG_M_MARGIN = 1.0
MERGE_TOL = 1e-7  # relative, for merging envelope pieces
SURFACE_SLACK = 1e-9


class TransmissionError(ValueError):
    """Malformed transmission data."""


class GuardExceededError(RuntimeError):
    """Too many region assignments to enumerate."""


class InconsistentRegionError(RuntimeError):
    """A point of a sub-region polygon has no certified control lifting."""


# ---------------------------------------------------------------------------
# data

@dataclass(eq=False)
class CostSurface:
    """Convex piecewise-linear cost max_k(slopes[k] @ u + intercepts[k])."""

    slopes: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self):
        self.slopes = np.asarray(self.slopes, float).reshape(-1, 2)
        self.intercepts = np.asarray(self.intercepts, float).ravel()
        if self.slopes.shape[0] != self.intercepts.size or self.intercepts.size == 0:
            raise ValueError("a cost surface needs at least one piece and matching arrays")

    @classmethod
    def constant(cls, c=0.0):
        return cls(np.zeros((1, 2)), [c])

    def __call__(self, u):
        u = np.asarray(u, float)
        return np.max(u @ self.slopes.T + self.intercepts, axis=-1)

    def shifted(self, c):
        return CostSurface(self.slopes, self.intercepts + c)

    def to_dict(self):
        return {"slopes": self.slopes.tolist(), "intercepts": self.intercepts.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["slopes"], d["intercepts"])


@dataclass(eq=False)
class VppRegion:
    """One sub-region offered to the transmission operator."""

    A: np.ndarray
    b: np.ndarray
    cost: CostSurface
    polygon: PccPolygon | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, float).reshape(-1, 2)
        self.b = np.asarray(self.b, float).ravel()

    @classmethod
    def from_polygon(cls, poly: PccPolygon, cost: CostSurface | None = None):
        return cls(poly.A, poly.b, cost or CostSurface.constant(), poly)

    def contains(self, u, tol=1e-7):
        return bool(np.all(self.A @ np.asarray(u, float) <= self.b + tol * max(1.0, np.abs(self.b).max())))


@dataclass(eq=False)
class DcTransmission:
    bus_ids: tuple
    demand: np.ndarray
    reference: int
    line_from: np.ndarray
    line_to: np.ndarray
    susceptance: np.ndarray
    limit: np.ndarray  # inf where unconstrained
    unit_bus: np.ndarray
    unit_min: np.ndarray
    unit_max: np.ndarray
    unit_cost: list  # per unit: (k, 2) array of (slope, intercept) pieces
    vpp_bus: np.ndarray
    vpp_scale: np.ndarray  # VPP per-unit -> transmission per-unit
    pcc_lo: np.ndarray  # (n_vpp, 2)
    pcc_hi: np.ndarray
    base_mva: float = 100.0
    line_ids: tuple = ()
    unit_ids: tuple = ()
    vpp_ids: tuple = ()

    def __post_init__(self):
        for name in ("demand", "susceptance", "limit", "unit_min", "unit_max", "vpp_scale"):
            setattr(self, name, np.asarray(getattr(self, name), float).ravel())
        for name in ("line_from", "line_to", "unit_bus", "vpp_bus"):
            setattr(self, name, np.asarray(getattr(self, name), int).ravel())
        self.pcc_lo = np.asarray(self.pcc_lo, float).reshape(-1, 2)
        self.pcc_hi = np.asarray(self.pcc_hi, float).reshape(-1, 2)
        self.unit_cost = [np.asarray(c, float).reshape(-1, 2) for c in self.unit_cost]
        nb = len(self.bus_ids)
        if self.demand.size != nb:
            raise TransmissionError("one demand per bus required")
        if not 0 <= self.reference < nb:
            raise TransmissionError("reference bus not found")
        if np.any(self.susceptance <= 0):
            raise TransmissionError("line susceptances must be positive")
        if np.any(self.limit < 0):
            raise TransmissionError("line limits must be non-negative")
        if np.any(self.unit_min > self.unit_max):
            raise TransmissionError("unit lower bound above upper bound")
        if len(self.unit_cost) != self.unit_bus.size or any(c.shape[0] == 0 for c in self.unit_cost):
            raise TransmissionError("every unit needs a cost")
        if np.any(self.pcc_lo > self.pcc_hi):
            raise TransmissionError("PCC lower bound above upper bound")
        ends = np.concatenate([self.line_from, self.line_to, self.unit_bus, self.vpp_bus])
        if ends.size and (ends.min() < 0 or ends.max() >= nb):
            raise TransmissionError("reference to an unknown bus")
        if not self._connected():
            raise TransmissionError("transmission network is not connected")

    def _connected(self):
        nb = self.n_buses
        seen = {self.reference}
        stack = [self.reference]
        adj = [[] for _ in range(nb)]
        for f, t in zip(self.line_from, self.line_to):
            adj[f].append(t)
            adj[t].append(f)
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == nb

    @property
    def n_buses(self):
        return len(self.bus_ids)

    @property
    def n_lines(self):
        return self.line_from.size

    @property
    def n_units(self):
        return self.unit_bus.size

    @property
    def n_vpps(self):
        return self.vpp_bus.size

    def incidence(self):
        """(n_lines, n_buses) with +1 at the from bus and -1 at the to bus."""
        C = np.zeros((self.n_lines, self.n_buses))
        C[np.arange(self.n_lines), self.line_from] = 1.0
        C[np.arange(self.n_lines), self.line_to] = -1.0
        return C

    def unit_cost_value(self, s):
        return float(sum(np.max(c[:, 0] * sk + c[:, 1]) for c, sk in zip(self.unit_cost, s)))


def ptdf(tr: DcTransmission):
    """Line flows per unit bus injection, withdrawn at the reference bus."""
    C = tr.incidence()
    Bf = tr.susceptance[:, None] * C
    Bbus = C.T @ Bf
    keep = np.delete(np.arange(tr.n_buses), tr.reference)
    out = np.zeros((tr.n_lines, tr.n_buses))
    out[:, keep] = Bf[:, keep] @ np.linalg.inv(Bbus[np.ix_(keep, keep)])
    return out


def transmission_from_dict(d) -> DcTransmission:
    if d.get("format", FORMAT) != FORMAT:
        raise TransmissionError(f"not a transmission file (format={d.get('format')!r})")
    try:
        base = float(d.get("base_mva", 100.0))
        buses = d["buses"]
        ids = [b["id"] for b in buses]
        if len(set(ids)) != len(ids):
            raise TransmissionError("duplicate bus ids")
        pos = {k: i for i, k in enumerate(ids)}

        def bus(key):
            if key not in pos:
                raise TransmissionError(f"unknown bus {key!r}")
            return pos[key]

        lines = d.get("lines", [])
        units = d.get("units", [])
        vpps = d.get("vpps", [])

        def cost(c):
            if np.isscalar(c):
                return [[float(c), 0.0]]
            return c

        def limit(v):
            return np.inf if v is None else float(v)

        inf2 = [None, None]
        return DcTransmission(
            bus_ids=tuple(ids), demand=[float(b.get("demand", 0.0)) for b in buses],
            reference=bus(d.get("reference", ids[0])),
            line_from=[bus(l["from"]) for l in lines], line_to=[bus(l["to"]) for l in lines],
            susceptance=[float(l["susceptance"]) for l in lines],
            limit=[limit(l.get("limit")) for l in lines],
            unit_bus=[bus(u["bus"]) for u in units],
            unit_min=[float(u["p"][0]) for u in units], unit_max=[float(u["p"][1]) for u in units],
            unit_cost=[cost(u.get("cost", 0.0)) for u in units],
            vpp_bus=[bus(v["bus"]) for v in vpps],
            vpp_scale=[float(v.get("base_mva", base)) / base for v in vpps],
            pcc_lo=[[_bound(v.get("p_pcc", inf2)[0], -np.inf),
                     _bound(v.get("q_pcc", inf2)[0], -np.inf)] for v in vpps],
            pcc_hi=[[_bound(v.get("p_pcc", inf2)[1], np.inf),
                     _bound(v.get("q_pcc", inf2)[1], np.inf)] for v in vpps],
            base_mva=base, line_ids=tuple(l.get("id", k) for k, l in enumerate(lines)),
            unit_ids=tuple(u.get("id", k) for k, u in enumerate(units)),
            vpp_ids=tuple(v.get("id", k) for k, v in enumerate(vpps)))
    except (KeyError, TypeError, IndexError) as exc:
        raise TransmissionError(f"missing or malformed field {exc}") from exc


def _bound(v, default):
    return default if v is None else float(v)


def load_transmission(path) -> DcTransmission:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TransmissionError(f"{path}: invalid JSON ({exc})") from exc
    return transmission_from_dict(d)


@dataclass(eq=False)
class CoordinationProblem:
    transmission: DcTransmission
    vpps: list  # per VPP: list of VppRegion
    big_m: float | None = None  # None: per-row values from the PCC bounding box

    def __post_init__(self):
        if len(self.vpps) != self.transmission.n_vpps:
            raise ValueError("one region list per VPP attachment required")
        if any(len(r) == 0 for r in self.vpps):
            raise ValueError("every VPP needs at least one sub-region")

    @property
    def n_assignments(self):
        return int(np.prod([len(r) for r in self.vpps]))


@dataclass
class Dispatch:
    status: str
    value: float = np.nan
    units: np.ndarray | None = None
    theta: np.ndarray | None = None
    flows: np.ndarray | None = None
    pcc: np.ndarray | None = None  # (n_vpp, 2)
    selected: list = field(default_factory=list)
    y: list = field(default_factory=list)  # per VPP: per-region y_j
    unit_cost: float = np.nan
    vpp_cost: float = np.nan
    method: str = ""
    report: list = field(default_factory=list)

    @property
    def optimal(self):
        return self.status == OPTIMAL

    def to_dict(self, tr: DcTransmission | None = None):
        d = {"status": self.status, "method": self.method, "value": _f(self.value),
             "unit_cost": _f(self.unit_cost), "vpp_cost": _f(self.vpp_cost)}
        if self.optimal:
            uid = tr.unit_ids if tr is not None and tr.unit_ids else range(len(self.units))
            vid = tr.vpp_ids if tr is not None and tr.vpp_ids else range(len(self.selected))
            d["units"] = [{"id": i, "p": float(p)} for i, p in zip(uid, self.units)]
            d["flows"] = self.flows.tolist()
            d["vpps"] = [{"id": i, "pcc": self.pcc[k].tolist(), "region": int(self.selected[k]),
                          "y": [float(v) for v in self.y[k]]} for k, i in enumerate(vid)]
        if self.report:
            d["report"] = self.report
        return d


def _f(v):
    return None if v is None or not np.isfinite(v) else float(v)


# ---------------------------------------------------------------------------
# cost surfaces

def triangular_samples(poly: PccPolygon, levels=4):
    """Barycentric lattice points over a fan triangulation of the polygon.

    A triangle at the default level gives 15 points.
    """
    v = poly.vertices
    if len(v) < 3:
        if len(v) == 1:
            return v.copy()
        t = np.linspace(0.0, 1.0, levels + 1)[:, None]
        return v[0] + t * (v[1] - v[0])
    pts = []
    for k in range(1, len(v) - 1):
        a, b, c = v[0], v[k], v[k + 1]
        for i in range(levels + 1):
            for j in range(levels + 1 - i):
                pts.append(a + (i / levels) * (b - a) + (j / levels) * (c - a))
    pts = np.array(pts)
    keep = []
    for p in pts:
        if all(np.max(np.abs(p - q)) > 1e-12 for q in keep):
            keep.append(p)
    return np.array(keep)


def lower_hull_pieces(points, values, slope_cap=1e6, tol=1e-9):
    """Affine pieces of the lower convex envelope of sampled (point, value) pairs.

    The pieces are the lower facets of the convex hull of the lifted samples.
    When qhull cannot build that hull (coplanar or collinear samples) a
    supporting plane is found per sample by LP instead, taking the flattest
    one where several exist. Duplicates are merged and dominated pieces pruned.
    """
    points = np.asarray(points, float).reshape(-1, 2)
    values = np.asarray(values, float).ravel()
    if np.ptp(values) <= tol * max(1.0, np.abs(values).max()):
        return CostSurface.constant(float(values.max()))
    vtol = tol * max(1.0, np.abs(values).max())
    facets = _lower_facets(points, values, slope_cap)
    if facets is not None:
        pieces = _merge_pieces(facets, points, values)
        at = np.hstack([points, np.ones((len(points), 1))]) @ pieces.T
        if np.max(np.abs(at.max(axis=1) - values)) <= 10 * vtol:
            pieces = _prune_pieces(pieces, points, MERGE_TOL * max(1.0, np.abs(values).max()))
            return CostSurface(pieces[:, :2], pieces[:, 2])
    # variables a (2), c, then |a| bounds s (2) for the flattening stage
    m = len(points)
    A_ub = np.hstack([points, np.ones((m, 1))])
    lb = np.array([-slope_cap, -slope_cap, -np.inf])
    ub = np.array([slope_cap, slope_cap, np.inf])
    eye = np.eye(2)
    A_abs = np.vstack([np.hstack([eye, np.zeros((2, 1)), -eye]),
                       np.hstack([-eye, np.zeros((2, 1)), -eye])])
    lb2 = np.concatenate([lb, [0.0, 0.0]])
    ub2 = np.concatenate([ub, [np.inf, np.inf]])
    c2 = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
    pieces = []
    for p in points:
        top = np.array([p[0], p[1], 1.0])
        res = lp_solve(LpProblem(-top, A_ub, values, lb=lb, ub=ub))
        if res.status != OPTIMAL:
            continue
        best = -res.value
        A2 = np.vstack([np.hstack([A_ub, np.zeros((m, 2))]), A_abs,
                        np.concatenate([-top, [0.0, 0.0]])[None, :]])
        b2 = np.concatenate([values, np.zeros(4), [-(best - vtol)]])
        flat = lp_solve(LpProblem(c2, A2, b2, lb=lb2, ub=ub2))
        pieces.append(flat.x[:3] if flat.status == OPTIMAL else res.x)
    pieces = _merge_pieces(np.array(pieces), points, values)
    pieces = _prune_pieces(pieces, points, MERGE_TOL * max(1.0, np.abs(values).max()))
    return CostSurface(pieces[:, :2], pieces[:, 2])


def _lower_facets(points, values, slope_cap):
    """(a1, a2, c) rows of the downward-facing hull facets of the lifted samples, or None."""
    # rescale the value axis to the point spread so qhull sees a well-shaped cloud
    span = max(float(np.ptp(points, axis=0).max()), 1e-300)
    z0, zs = float(values.min()), float(np.ptp(values)) / span
    lifted = np.column_stack([points, (values - z0) / zs])
    try:
        hull = ConvexHull(lifted, qhull_options="Qt")
    except QhullError:
        return None
    eq = hull.equations[hull.equations[:, 2] < -1e-9]
    if len(eq) == 0:
        return None
    # n . (x, y, z) + d = 0  ->  z = -(n1 x + n2 y + d) / n3, then undo the rescaling
    a = -eq[:, :2] / eq[:, 2:3] * zs
    c = -eq[:, 3] / eq[:, 2] * zs + z0
    ok = np.all(np.abs(a) <= slope_cap, axis=1)
    return np.column_stack([a, c])[ok] if ok.any() else None


def _merge_pieces(pieces, points, values):
    """Keep one representative of planes that agree at every sample up to MERGE_TOL."""
    A = np.hstack([points, np.ones((len(points), 1))])
    tol = MERGE_TOL * max(1.0, np.abs(values).max())
    kept = []
    for row in pieces:
        at = A @ row
        if all(np.max(np.abs(at - A @ q)) > tol for q in kept):
            kept.append(row)
    return np.array(kept)


def _prune_pieces(pieces, points, tol):
    """Drop pieces that never exceed the max of the others over the hull of ``points``."""
    if len(pieces) <= 1:
        return pieces
    hull = PccPolygon.from_vertices(points)
    if len(hull.vertices) < 3:
        return pieces
    keep = list(range(len(pieces)))
    # variables u (2), t: maximise piece_k(u) - t with t above every other kept piece
    for k in range(len(pieces) - 1, -1, -1):
        others = [j for j in keep if j != k]
        if not others:
            break
        P = pieces[others]
        A = np.vstack([np.hstack([hull.A, np.zeros((hull.A.shape[0], 1))]),
                       np.hstack([P[:, :2], -np.ones((len(others), 1))])])
        b = np.concatenate([hull.b, -P[:, 2]])
        c = np.array([-pieces[k, 0], -pieces[k, 1], 1.0])
        res = lp_solve(LpProblem(c, A, b, lb=[-np.inf] * 3))
        if res.status == OPTIMAL and -res.value + pieces[k, 2] <= tol:
            keep.remove(k)
    return pieces[keep]


def linear_control_cost(net, costs=None):
    """Per-control linear cost vector over u; only active generation carries cost."""
    c = np.zeros(net.n_u)
    gc = net.gen_cost if costs is None else np.asarray(costs, float).reshape(-1, 2)
    if np.any(np.abs(gc[:, 1]) > 0):
        raise ValueError("cost surfaces need linear generator costs")
    c[:net.n_gens] = gc[:, 0]
    return c


def build_cost_surface(sr, net, costs=None, levels=4) -> CostSurface:
    """Minimum internal generation cost over the sub-region as a function of the PCC point.

    At each lattice sample the cheapest certified control deviation is found
    by LP over the sub-region polytope; the lower convex envelope of the
    sampled costs is returned.
    """
    cu = linear_control_cost(net, costs)
    base = float(cu @ sr.anchor.u)
    if sr.degenerate:
        return CostSurface.constant(base)
    poly = sr.omega(net)
    flex = flexible_controls(net)
    obj = np.concatenate([[0.0, 0.0], cu[flex]])
    n = poly.dim
    scale = max(1.0, float(np.abs(poly.b).max(initial=0.0)))
    pts = triangular_samples(sr.polygon, levels)
    vals = []
    for p in pts:
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        lb[:2] = ub[:2] = p - sr.anchor.pcc
        res = lp_solve(LpProblem(obj, poly.A, poly.b + SURFACE_SLACK * scale, lb=lb, ub=ub))
        if res.status != OPTIMAL:
            raise InconsistentRegionError(f"no certified controls at PCC point {p}")
        vals.append(base + res.value)
    return lower_hull_pieces(pts, vals)


# ---------------------------------------------------------------------------
# LP assembly

class _Builder:
    def __init__(self):
        self.n = 0
        self.lb, self.ub, self.c = [], [], []
        self.ub_rows, self.ub_rhs, self.eq_rows, self.eq_rhs = [], [], [], []
        self.names = []

    def var(self, k, lb=-np.inf, ub=np.inf, cost=0.0):
        sl = np.arange(self.n, self.n + k)
        self.n += k
        self.lb.append(np.broadcast_to(np.asarray(lb, float), (k,)).copy())
        self.ub.append(np.broadcast_to(np.asarray(ub, float), (k,)).copy())
        self.c.append(np.broadcast_to(np.asarray(cost, float), (k,)).copy())
        return sl

    def row(self, terms, rhs, eq=False, name=""):
        (self.eq_rows if eq else self.ub_rows).append((terms, rhs))
        if not eq:
            self.names.append(name)

    def problem(self) -> LpProblem:
        def dense(rows):
            M = np.zeros((len(rows), self.n))
            b = np.zeros(len(rows))
            for i, (terms, rhs) in enumerate(rows):
                for idx, coef in terms:
                    np.add.at(M[i], idx, coef)
                b[i] = rhs
            return M, b

        A_ub, b_ub = dense(self.ub_rows)
        A_eq, b_eq = dense(self.eq_rows)
        return LpProblem(np.concatenate(self.c) if self.c else np.zeros(0), A_ub, b_ub, A_eq, b_eq,
                         np.concatenate(self.lb), np.concatenate(self.ub))


def _transmission_part(tr: DcTransmission, bld: _Builder, vpp_p):
    """Units, unit cost epigraphs, angles, balance and line rows. Returns index arrays."""
    s = bld.var(tr.n_units, tr.unit_min, tr.unit_max)
    t = bld.var(tr.n_units, cost=1.0)
    th_lb = np.full(tr.n_buses, -np.inf)
    th_ub = np.full(tr.n_buses, np.inf)
    th_lb[tr.reference] = th_ub[tr.reference] = 0.0
    th = bld.var(tr.n_buses, th_lb, th_ub)
    for g, pieces in enumerate(tr.unit_cost):
        for a, c in pieces:
            bld.row([(s[g], a), (t[g], -1.0)], -c, name=f"unit {tr.unit_ids[g] if tr.unit_ids else g} cost")
    Bf = tr.susceptance[:, None] * tr.incidence()
    Bbus = tr.incidence().T @ Bf
    for i in range(tr.n_buses):
        terms = [(th, -Bbus[i])]
        for g in np.flatnonzero(tr.unit_bus == i):
            terms.append((s[g], 1.0))
        for v in np.flatnonzero(tr.vpp_bus == i):
            terms.append((vpp_p[v], -tr.vpp_scale[v]))
        bld.row(terms, tr.demand[i], eq=True)
    for l in range(tr.n_lines):
        if np.isfinite(tr.limit[l]):
            name = f"line {tr.line_ids[l] if tr.line_ids else l}"
            bld.row([(th, Bf[l])], tr.limit[l], name=name + " forward limit")
            bld.row([(th, -Bf[l])], tr.limit[l], name=name + " reverse limit")
    return s, t, th


def _pcc_bounds(tr, v, regions):
    """Bounding box of the union of a VPP's polygons intersected with its PCC limits."""
    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for r in regions:
        if r.polygon is not None:
            lo = np.minimum(lo, r.polygon.vertices.min(axis=0))
            hi = np.maximum(hi, r.polygon.vertices.max(axis=0))
        else:
            for d in range(2):
                for sgn in (1.0, -1.0):
                    e = np.zeros(2)
                    e[d] = sgn
                    res = lp_solve(LpProblem(-e, r.A, r.b, lb=[-np.inf] * 2))
                    if res.status == OPTIMAL:
                        val = -res.value * sgn
                        lo[d] = min(lo[d], val)
                        hi[d] = max(hi[d], val)
                    elif res.status == UNBOUNDED:
                        (hi if sgn > 0 else lo)[d] = sgn * np.inf
    return np.maximum(lo, tr.pcc_lo[v]), np.minimum(hi, tr.pcc_hi[v])


def _unpack(tr, res_x, s, th, u_idx):
    units = res_x[s]
    theta = res_x[th]
    flows = (tr.susceptance[:, None] * tr.incidence()) @ theta
    pcc = np.array([res_x[u] for u in u_idx]).reshape(-1, 2)
    return units, theta, flows, pcc


# ---------------------------------------------------------------------------
# TP by enumeration

def _assignment_lp(cp: CoordinationProblem, assign, elastic=False):
    tr = cp.transmission
    bld = _Builder()
    u_idx = [bld.var(2, tr.pcc_lo[v], tr.pcc_hi[v]) for v in range(tr.n_vpps)]
    s, t, th = _transmission_part(tr, bld, [u[0] for u in u_idx])
    y_idx = []
    for v, j in enumerate(assign):
        reg = cp.vpps[v][j]
        y = bld.var(1, -np.inf, np.inf, cost=1.0)
        y_idx.append(y)
        for k in range(reg.A.shape[0]):
            bld.row([(u_idx[v], reg.A[k])], reg.b[k], name=f"vpp {v} region {j} row {k}")
        for a, c in zip(reg.cost.slopes, reg.cost.intercepts):
            bld.row([(u_idx[v], a), (y, -1.0)], -c, name=f"vpp {v} region {j} cost")
    prob = bld.problem()
    if elastic:
        prob = _elastic(prob)
    return prob, bld, (s, t, th, u_idx, y_idx)


def _elastic(prob: LpProblem):
    """Same rows with a non-negative slack per inequality; minimise total slack."""
    m, n = prob.A_ub.shape
    A = np.hstack([prob.A_ub, -np.eye(m)])
    A_eq = np.hstack([prob.A_eq, np.zeros((prob.A_eq.shape[0], m))])
    c = np.concatenate([np.zeros(n), np.ones(m)])
    # variable bounds on PCC and units become soft through their own rows
    return LpProblem(c, A, prob.b_ub, A_eq, prob.b_eq, np.concatenate([prob.lb, np.zeros(m)]),
                     np.concatenate([prob.ub, np.full(m, np.inf)]))


def _solve_assignment(cp, assign, method):
    prob, _, idx = _assignment_lp(cp, assign)
    res = lp_solve(prob, method=method)
    return assign, res, idx


def _threads():
    from .oracle import threads
    return threads()


def solve_tp_enumerate(cp: CoordinationProblem, method="highs", guard=ENUMERATION_GUARD) -> Dispatch:
    """Exact TP: one LP per choice of sub-region for every VPP."""
    tr = cp.transmission
    if cp.n_assignments > guard:
        raise GuardExceededError(f"{cp.n_assignments} assignments exceed the guard of {guard}; use solve_etp")
    assigns = list(itertools.product(*[range(len(r)) for r in cp.vpps]))
    n_thr = _threads()
    if n_thr > 1:
        with ThreadPoolExecutor(n_thr) as ex:
            results = list(ex.map(lambda a: _solve_assignment(cp, a, method), assigns))
    else:
        results = [_solve_assignment(cp, a, method) for a in assigns]
    best = None
    for assign, res, idx in results:
        if res.status == UNBOUNDED:
            return Dispatch(UNBOUNDED, method="tp-enumerate")
        if res.status == OPTIMAL and (best is None or res.value < best[1].value - 1e-12):
            best = (assign, res, idx)
    if best is None:
        return Dispatch(INFEASIBLE, method="tp-enumerate", report=infeasibility_report(cp))
    assign, res, (s, t, th, u_idx, y_idx) = best
    units, theta, flows, pcc = _unpack(tr, res.x, s, th, u_idx)
    y = []
    for v, j in enumerate(assign):
        yv = np.zeros(len(cp.vpps[v]))
        yv[j] = cp.vpps[v][j].cost(pcc[v])
        y.append(yv)
    return _finish(tr, cp, units, theta, flows, pcc, list(assign), y, "tp-enumerate")


def _finish(tr, cp, units, theta, flows, pcc, selected, y, method):
    uc = tr.unit_cost_value(units)
    vc = float(sum(cp.vpps[v][j].cost(pcc[v]) for v, j in enumerate(selected)))
    return Dispatch(OPTIMAL, uc + vc, units, theta, flows, pcc, selected, y, uc, vc, method)


def infeasibility_report(cp: CoordinationProblem, limit=200):
    """Constraints that must be relaxed for the least-violating region assignment."""
    best = None
    for n, assign in enumerate(itertools.product(*[range(len(r)) for r in cp.vpps])):
        if n >= limit:
            break
        prob, bld, _ = _assignment_lp(cp, assign, elastic=True)
        res = lp_solve(prob)
        if res.status != OPTIMAL:
            continue
        if best is None or res.value < best[0]:
            slack = res.x[prob.c.size - len(bld.names):]
            best = (res.value, assign, slack, bld.names)
    if best is None:
        return ["transmission balance cannot be met within unit bounds and PCC limits"]
    _, assign, slack, names = best
    out = [f"{names[k]} violated by {slack[k]:.6g}" for k in np.argsort(-slack) if slack[k] > 1e-9]
    if not out:
        out = ["power balance cannot be met within unit bounds and PCC limits"]
    return [f"least-violating region choice {list(assign)}"] + out


# ---------------------------------------------------------------------------
# E-TP by big-M MILP

def surface_floor(region: VppRegion):
    """Minimum of the cost surface over the region polygon (LP)."""
    # variables u (2), y
    A = np.vstack([np.hstack([region.A, np.zeros((region.A.shape[0], 1))]),
                   np.hstack([region.cost.slopes, -np.ones((region.cost.intercepts.size, 1))])])
    b = np.concatenate([region.b, -region.cost.intercepts])
    res = lp_solve(LpProblem([0.0, 0.0, 1.0], A, b, lb=[-np.inf] * 3))
    return res.value if res.status == OPTIMAL else np.inf


def _box_max(a, lo, hi):
    """max of a @ u over the box [lo, hi]."""
    return float(np.sum(np.where(a > 0, a * hi, a * lo)))


def solve_etp(cp: CoordinationProblem, method="highs", validate=False) -> Dispatch:
    """E-TP: one binary per sub-region, big-M relaxed region and cost rows."""
    tr = cp.transmission
    bld = _Builder()
    boxes = [_pcc_bounds(tr, v, cp.vpps[v]) for v in range(tr.n_vpps)]
    if any(np.any(lo > hi + 1e-12) for lo, hi in boxes):
        return Dispatch(INFEASIBLE, method="etp", report=infeasibility_report(cp))
    if cp.big_m is None and any(not np.all(np.isfinite(np.concatenate(b))) for b in boxes):
        raise ValueError("unbounded PCC box; give big_m explicitly")
    u_idx = [bld.var(2, lo, hi) for lo, hi in boxes]
    s, t, th = _transmission_part(tr, bld, [u[0] for u in u_idx])
    # y_j >= 0 needs non-negative surfaces; shift each VPP by its floor (one region is chosen)
    shifts = []
    for regs in cp.vpps:
        floor = min(surface_floor(r) for r in regs)
        shifts.append(min(0.0, floor) if np.isfinite(floor) else 0.0)
    k_idx, y_idx = [], []
    for v, regs in enumerate(cp.vpps):
        lo, hi = boxes[v]
        ks = bld.var(len(regs), 0.0, 1.0)
        ys = bld.var(len(regs), 0.0, np.inf, cost=1.0)
        k_idx.append(ks)
        y_idx.append(ys)
        bld.row([(ks, np.ones(len(regs)))], 1.0, eq=True)
        for j, reg in enumerate(regs):
            for r in range(reg.A.shape[0]):
                M = cp.big_m if cp.big_m is not None else \
                    max(_box_max(reg.A[r], lo, hi) - reg.b[r], 0.0) + BIG_M_MARGIN
                bld.row([(u_idx[v], reg.A[r]), (ks[j], M)], reg.b[r] + M)
            for a, c in zip(reg.cost.slopes, reg.cost.intercepts):
                c = c - shifts[v]
                M = cp.big_m if cp.big_m is not None else max(_box_max(a, lo, hi) + c, 0.0) + BIG_M_MARGIN
                bld.row([(u_idx[v], a), (ys[j], -1.0), (ks[j], M)], M - c)
    prob = bld.problem()
    res = milp_solve(prob, np.concatenate(k_idx), method=method)
    if res.status != OPTIMAL:
        return Dispatch(res.status, method="etp",
                        report=infeasibility_report(cp) if res.status == INFEASIBLE else [])
    units, theta, flows, pcc = _unpack(tr, res.x, s, th, u_idx)
    selected = [int(np.argmax(res.x[ks])) for ks in k_idx]
    y = [res.x[ys] + shifts[v] * (np.arange(len(ys)) == selected[v]) for v, ys in enumerate(y_idx)]
    out = Dispatch(OPTIMAL, res.value + sum(shifts), units, theta, flows, pcc, selected, y,
                   tr.unit_cost_value(units), float(sum(yv.sum() for yv in y)), "etp")
    if validate:
        out.report = validate_dispatch(cp, out)
    return out


def validate_dispatch(cp: CoordinationProblem, disp: Dispatch, tol=1e-6):
    """Problems found when checking an E-TP dispatch against the enumeration oracle."""
    issues = []
    for v, j in enumerate(disp.selected):
        if not cp.vpps[v][j].contains(disp.pcc[v]):
            issues.append(f"vpp {v}: PCC point {disp.pcc[v].tolist()} outside selected region {j}")
    direct = disp.unit_cost + sum(cp.vpps[v][j].cost(disp.pcc[v]) for v, j in enumerate(disp.selected))
    if abs(direct - disp.value) > tol * max(1.0, abs(direct)):
        issues.append(f"reported value {disp.value:.9g} differs from recomputed cost {direct:.9g}")
    if cp.n_assignments <= ENUMERATION_GUARD:
        ref = solve_tp_enumerate(cp)
        if ref.status != disp.status or (ref.optimal and abs(ref.value - disp.value)
                                         > tol * max(1.0, abs(ref.value))):
            issues.append(f"enumeration oracle value {ref.value:.9g} differs from {disp.value:.9g}")
    return issues


# ---------------------------------------------------------------------------
# atlases

def problem_from_atlases(tr: DcTransmission, atlases, big_m=None) -> CoordinationProblem:
    """One region list per VPP from its atlas; stored cost surfaces are used when present."""
    vpps = []
    for atlas in atlases:
        regs = []
        for k, sr in enumerate(atlas.subregions):
            cs = atlas.cost_surfaces.get(k)
            regs.append(VppRegion.from_polygon(sr.polygon, CostSurface.from_dict(cs) if cs else None))
        vpps.append(regs)
    return CoordinationProblem(tr, vpps, big_m)
