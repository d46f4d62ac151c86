"""Polytope projection onto the PCC plane and planar polygon utilities.

``project_to_pcc`` computes the exact projection of a polytope
``{z : A z <= b}`` onto its first two coordinates by a support-function
sweep: support points in a ring of directions are refined by querying the
outward normal of every provisional edge until each edge is confirmed to be
a facet of the projection. Each vertex keeps the full LP solution
(its lifting) as a certificate.

``fourier_motzkin`` and ``fme_project`` are an independent projection used
to cross-check the sweep in low dimension.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

VERTEX_MERGE_TOL = 1e-7
MEMBERSHIP_TOL = 1e-9


class EmptyRegionError(ValueError):
    """The polytope to project has no points."""


@dataclass(eq=False)
class Polytope:
    """{z : A @ z <= b}."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, float))
        self.b = np.asarray(self.b, float).ravel()
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b sizes differ")

    @property
    def dim(self):
        return self.A.shape[1]

    def contains(self, z, tol=1e-9):
        return bool(np.all(self.A @ np.asarray(z, float) <= self.b + tol))


@dataclass(eq=False)
class PccPolygon:
    """Convex polygon in the PCC plane: counter-clockwise vertices and halfspaces A p <= b."""

    vertices: np.ndarray
    A: np.ndarray
    b: np.ndarray
    liftings: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float).reshape(-1, 2)
        self.A = np.asarray(self.A, float).reshape(-1, 2)
        self.b = np.asarray(self.b, float).ravel()
        if self.liftings is not None:
            self.liftings = np.asarray(self.liftings, float).reshape(self.vertices.shape[0], -1)

    @classmethod
    def from_vertices(cls, pts, liftings=None):
        pts = np.asarray(pts, float).reshape(-1, 2)
        idx = convex_hull_indices(pts)
        verts = pts[idx]
        lift = None if liftings is None else np.asarray(liftings)[idx]
        A, b = halfspaces_from_vertices(verts)
        return cls(verts, A, b, lift)

    @property
    def area(self):
        return polygon_area(self.vertices)

    def contains(self, p, tol=MEMBERSHIP_TOL):
        return polygon_membership(self, p, tol)

    def to_dict(self):
        d = {"vertices": self.vertices.tolist(), "A": self.A.tolist(), "b": self.b.tolist()}
        if self.liftings is not None:
            d["liftings"] = self.liftings.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["vertices"], d["A"], d["b"], d.get("liftings"))


# ---------------------------------------------------------------------------
# planar helpers

def convex_hull_indices(pts, tol=1e-12):
    """Indices of the convex hull vertices in counter-clockwise order (monotone chain).

    Collinear points are dropped; a degenerate set returns its one or two
    extreme points.
    """
    pts = np.asarray(pts, float)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    # drop exact duplicates
    uniq = [order[0]]
    for k in order[1:]:
        if np.max(np.abs(pts[k] - pts[uniq[-1]])) > 0:
            uniq.append(k)
    if len(uniq) == 1:
        return np.array(uniq)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300)

    def chain(seq):
        out = []
        for k in seq:
            while len(out) >= 2 and cross(pts[out[-2]], pts[out[-1]], pts[k]) <= tol * scale ** 2:
                out.pop()
            out.append(k)
        return out

    lower = chain(uniq)
    upper = chain(uniq[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 2:
        hull = [uniq[0], uniq[-1]]
    return np.asarray(hull, dtype=int)


def polygon_area(verts):
    v = np.asarray(verts, float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def halfspaces_from_vertices(verts):
    """Outward unit-normal halfspaces of a CCW convex polygon (handles point/segment)."""
    v = np.asarray(verts, float).reshape(-1, 2)
    if len(v) == 1:
        A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        return A, A @ v[0]
    if len(v) == 2:
        d = v[1] - v[0]
        d /= np.linalg.norm(d)
        nrm = np.array([d[1], -d[0]])
        A = np.array([nrm, -nrm, d, -d])
        b = np.array([nrm @ v[0], -nrm @ v[0], d @ v[1], -d @ v[0]])
        return A, b
    nxt = np.roll(v, -1, axis=0)
    e = nxt - v
    nrm = np.column_stack([e[:, 1], -e[:, 0]])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return nrm, np.einsum("ij,ij->i", nrm, v)


def polygon_membership(poly, p, tol=MEMBERSHIP_TOL):
    """Membership in one polygon or in the union of a list of polygons."""
    p = np.asarray(p, float)
    if isinstance(poly, PccPolygon):
        return bool(np.all(poly.A @ p <= poly.b + tol))
    return any(bool(np.all(g.A @ p <= g.b + tol)) for g in poly)


def union_mask(polys, pts, tol=MEMBERSHIP_TOL):
    """Boolean mask of the rows of ``pts`` lying in at least one polygon."""
    pts = np.asarray(pts, float).reshape(-1, 2)
    hit = np.zeros(len(pts), dtype=bool)
    for g in polys:
        hit |= np.all(pts @ g.A.T <= g.b + tol, axis=1)
    return hit


def union_coverage(polys, grid, tol=MEMBERSHIP_TOL):
    """Fraction of the grid's feasible cell centres inside the union of ``polys``."""
    pts = grid.centers()
    if len(pts) == 0:
        return 0.0
    return float(union_mask(polys, pts, tol).mean())


def strictly_inside(poly: PccPolygon, p, tol=MEMBERSHIP_TOL):
    if len(poly.vertices) < 3:
        return False
    return bool(np.all(poly.A @ np.asarray(p, float) < poly.b - tol))


def point_polygon_distance(poly: PccPolygon, p):
    p = np.asarray(p, float)
    v = poly.vertices
    if len(v) >= 3 and polygon_membership(poly, p, 0.0):
        return 0.0
    if len(v) == 1:
        return float(np.linalg.norm(p - v[0]))
    segs = zip(v, np.roll(v, -1, axis=0)) if len(v) >= 3 else [(v[0], v[1])]
    best = np.inf
    for a, b in segs:
        d = b - a
        t = np.clip(np.dot(p - a, d) / max(np.dot(d, d), 1e-300), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(p - (a + t * d))))
    return best


def hausdorff(p1: PccPolygon, p2: PccPolygon):
    """Hausdorff distance between two convex polygons (attained at vertices)."""
    d1 = max(point_polygon_distance(p2, v) for v in p1.vertices)
    d2 = max(point_polygon_distance(p1, v) for v in p2.vertices)
    return max(d1, d2)


def sample_polygon(poly: PccPolygon, n, rng):
    """Uniform samples from a polygon (points on a degenerate one)."""
    v = poly.vertices
    if len(v) == 1:
        return np.repeat(v, n, axis=0)
    if len(v) == 2:
        t = rng.random(n)[:, None]
        return v[0] + t * (v[1] - v[0])
    tri = [(v[0], v[k], v[k + 1]) for k in range(1, len(v) - 1)]
    areas = np.array([abs(polygon_area(np.array(t))) for t in tri])
    if areas.sum() <= 0:
        t = rng.random(n)[:, None]
        return v[0] + t * (v[-1] - v[0])
    pick = rng.choice(len(tri), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    a = np.array([tri[k][0] for k in pick])
    b = np.array([tri[k][1] for k in pick])
    c = np.array([tri[k][2] for k in pick])
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


# ---------------------------------------------------------------------------
# projection by support-function sweep

def _support(poly: Polytope, d):
    from .optim import lp_solve, LpProblem, OPTIMAL, UNBOUNDED
    n = poly.dim
    c = np.zeros(n)
    c[:2] = -np.asarray(d, float)
    res = lp_solve(LpProblem(c, poly.A, poly.b, lb=np.full(n, -np.inf), ub=np.full(n, np.inf)))
    if res.status == UNBOUNDED:
        raise ValueError("polytope is unbounded in the PCC plane")
    if res.status != OPTIMAL:
        return None
    return res.x


def project_to_pcc(poly: Polytope, offset=(0.0, 0.0), n_init=16, tol=1e-9,
                   merge_tol=VERTEX_MERGE_TOL, max_queries=4000) -> PccPolygon:
    """Exact projection of ``poly`` onto its first two coordinates, shifted by ``offset``.

    Raises EmptyRegionError for an empty polytope.
    """
    offset = np.asarray(offset, float)
    angles = 2 * np.pi * np.arange(n_init) / n_init
    pts, lifts = [], []

    def add(z):
        p = z[:2]
        for k, q in enumerate(pts):
            if np.max(np.abs(p - q)) <= merge_tol:
                return k
        pts.append(p.copy())
        lifts.append(z.copy())
        return len(pts) - 1

    for a in angles:
        z = _support(poly, (np.cos(a), np.sin(a)))
        if z is None:
            raise EmptyRegionError("polytope is empty")
        add(z)
    queries = n_init
    confirmed = set()
    while True:
        P = np.array(pts)
        hull = convex_hull_indices(P)
        if len(hull) < 2:
            break
        new = False
        edges = list(zip(hull, np.roll(hull, -1))) if len(hull) >= 3 else [(hull[0], hull[1]),
                                                                            (hull[1], hull[0])]
        for i, j in edges:
            key = (int(i), int(j))
            if key in confirmed:
                continue
            e = P[j] - P[i]
            nrm = np.array([e[1], -e[0]])
            ln = np.linalg.norm(nrm)
            if ln == 0:
                confirmed.add(key)
                continue
            nrm /= ln
            z = _support(poly, nrm)
            queries += 1
            if queries > max_queries:
                raise RuntimeError("projection did not converge")
            gain = nrm @ z[:2] - nrm @ P[i]
            if gain > tol * max(1.0, np.abs(P).max()):
                k = add(z)
                if k == len(pts) - 1:
                    new = True
                    continue
            confirmed.add(key)
        if not new:
            break
    P = np.array(pts)
    hull = convex_hull_indices(P)
    verts = P[hull] + offset
    A, b = halfspaces_from_vertices(verts)
    return PccPolygon(verts, A, b, np.array(lifts)[hull])


def polygon_from_halfspaces(A, b, tol=1e-9):
    """Vertices of a bounded 2-D polytope {p : A p <= b} by pairwise enumeration."""
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    pts = []
    m = len(b)
    for i in range(m):
        for j in range(i + 1, m):
            M = A[[i, j]]
            if abs(np.linalg.det(M)) < 1e-14:
                continue
            p = np.linalg.solve(M, b[[i, j]])
            if np.all(A @ p <= b + tol * max(1.0, np.abs(b).max())):
                pts.append(p)
    if not pts:
        raise EmptyRegionError("no vertices")
    return PccPolygon.from_vertices(np.array(pts))


# ---------------------------------------------------------------------------
# Fourier-Motzkin oracle

def remove_redundant(A, b, tol=1e-9):
    """Drop rows implied by the others (one LP per row)."""
    from .optim import lp_solve, LpProblem, OPTIMAL
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    # normalise and drop duplicates first
    nrm = np.linalg.norm(A, axis=1)
    zero = nrm < 1e-14
    if np.any(zero & (b < -tol)):
        raise EmptyRegionError("infeasible constant row")
    A, b = A[~zero] / nrm[~zero, None], b[~zero] / nrm[~zero]
    keep = np.ones(len(b), dtype=bool)
    n = A.shape[1]
    for i in range(len(b)):
        keep[i] = False
        others = np.flatnonzero(keep)
        if others.size == 0:
            keep[i] = True
            continue
        res = lp_solve(LpProblem(-A[i], A[others], b[others] + 0.0, lb=np.full(n, -np.inf),
                                 ub=np.full(n, np.inf)))
        if res.status != OPTIMAL or -res.value > b[i] + tol:
            keep[i] = True
    return A[keep], b[keep]


def fourier_motzkin(A, b, keep_dims=2, max_dim=8):
    """Project {z : A z <= b} onto its first ``keep_dims`` coordinates by elimination."""
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    if A.shape[1] > max_dim:
        raise ValueError(f"Fourier-Motzkin limited to dimension <= {max_dim}")
    while A.shape[1] > keep_dims:
        k = A.shape[1] - 1
        col = A[:, k]
        pos, neg, zer = col > 1e-12, col < -1e-12, np.abs(col) <= 1e-12
        rows, rhs = [A[zer, :k]], [b[zer]]
        for i in np.flatnonzero(pos):
            for j in np.flatnonzero(neg):
                a = A[i] / col[i] - A[j] / col[j]
                rows.append(a[None, :k])
                rhs.append(np.array([b[i] / col[i] - b[j] / col[j]]))
        A = np.vstack(rows)
        b = np.concatenate(rhs)
        A, b = remove_redundant(A, b)
    return A, b


def fme_project(poly: Polytope, max_dim=8) -> PccPolygon:
    """Projection onto the PCC plane by elimination; a slow exact reference."""
    A, b = fourier_motzkin(poly.A, poly.b, 2, max_dim)
    if A.shape[0] == 0:
        raise ValueError("projection is unbounded")
    return polygon_from_halfspaces(A, b)
