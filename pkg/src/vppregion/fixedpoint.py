"""Fixed-point reformulation of the DistFlow equations around a solved anchor.

The root voltage is held at its set-point, so the state deviation ``z`` used
here is ``(P, Q, V without the root, I, beta)``. ``beta`` holds two balancing
amounts: the controls actually applied are ``u0 + u_t + D @ beta``, where ``D``
(the participation matrix) spreads active and reactive power changes over the
flexible controls. With these two extra unknowns the linearised system is
square, and every power-flow solution near the anchor is a fixed point of::

    z = F_pcc @ upcc_t + F_u @ u_t + F_x @ r(z)

where ``r`` is the second-order remainder of the current definition.

A box on ``z`` that this map sends into itself for every admissible
``(upcc_t, u_t)`` certifies that a solution exists inside the box (Brouwer).
``check_brouwer_condition`` tests the width condition on the V/I rows;
``complete_box`` adds the flow and balancing rows so that the condition holds
for the whole state; ``build_omega_polytope`` turns a certified box into
linear constraints on ``(upcc_t, u_t)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .geometry import Polytope
from .netmodel import (Network, OperatingPoint, control_incidence, jacobian_f, pcc_incidence)

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
SIGN_TOL = 1e-14


class SingularAnchorError(RuntimeError):
    """The reduced Jacobian at the anchor is (numerically) singular."""


class BrouwerConditionError(ValueError):
    """The box does not map into itself, so no region can be certified."""


def quadratic_corner_bounds(lo, hi):
    """Bounds of ``-x**2`` for ``x`` in ``[lo, hi]``. Returns (min, max)."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    if np.any(lo > hi):
        raise ValueError("lower bound above upper bound")
    sq = np.maximum(lo ** 2, hi ** 2)
    straddle = (lo <= 0) & (hi >= 0)
    rmax = np.where(straddle, 0.0, -np.minimum(lo ** 2, hi ** 2))
    return -sq, rmax


def bilinear_corner_bounds(xlo, xhi, ylo, yhi):
    """Bounds of ``x * y`` over a box, attained at the corners. Returns (min, max)."""
    c = np.stack(np.broadcast_arrays(np.multiply(xlo, ylo), np.multiply(xlo, yhi),
                                     np.multiply(xhi, ylo), np.multiply(xhi, yhi)))
    return c.min(axis=0), c.max(axis=0)


@dataclass(frozen=True, eq=False)
class StateLayout:
    n_branches: int

    @property
    def n(self):
        return 4 * self.n_branches + 2

    def rows(self, name):
        L = self.n_branches
        return {"P": slice(0, L), "Q": slice(L, 2 * L), "V": slice(2 * L, 3 * L),
                "I": slice(3 * L, 4 * L), "beta": slice(4 * L, 4 * L + 2)}[name]

    @property
    def vi_rows(self):
        L = self.n_branches
        return np.arange(2 * L, 4 * L)


@dataclass(frozen=True, eq=False)
class FixedPointModel:
    net: Network
    anchor: OperatingPoint
    balancing: np.ndarray
    jac: np.ndarray
    F_pcc: np.ndarray
    F_u: np.ndarray
    F_x: np.ndarray
    layout: StateLayout
    cond: float

    @property
    def L(self):
        """Remainder map on the V/I rows with sign noise below SIGN_TOL removed."""
        Lx = self.F_x[self.layout.vi_rows]
        return np.where(np.abs(Lx) < SIGN_TOL, 0.0, Lx)

    @property
    def L_plus(self):
        return np.maximum(self.L, 0.0)

    @property
    def L_minus(self):
        return np.minimum(self.L, 0.0)

    @property
    def M_plus(self):
        return self.L_plus - self.L_minus

    @property
    def M_full(self):
        return np.abs(self.F_x)

    @property
    def H(self):
        """Row norms of the linear control map over the V/I rows."""
        rows = self.layout.vi_rows
        return np.sqrt((self.F_pcc[rows] ** 2).sum(axis=1) + (self.F_u[rows] ** 2).sum(axis=1))

    def state_perturbation(self, z):
        """Full DistFlow state deviation (root voltage deviation zero) and beta."""
        net = self.net
        L = net.n_branches
        dx = np.zeros(net.n_x)
        keep = np.delete(np.arange(net.n_x), 2 * L + net.root)
        dx[keep] = z[:4 * L]
        return dx, z[4 * L:]

    def linear_prediction(self, upcc_t, u_t):
        return self.F_pcc @ np.asarray(upcc_t, float) + self.F_u @ np.asarray(u_t, float)


def build_fixed_point_model(net: Network, anchor: OperatingPoint, balancing) -> FixedPointModel:
    D = np.asarray(balancing, float).reshape(net.n_u, 2)
    L = net.n_branches
    keep = np.delete(np.arange(net.n_x), 2 * L + net.root)
    K1 = pcc_incidence(net)
    K2 = control_incidence(net)
    J = np.hstack([jacobian_f(net, anchor)[:, keep], -K2 @ D])
    if np.abs(D).sum(axis=0).min() == 0.0:
        raise SingularAnchorError("no flexible control can balance active or reactive power")
    cond = float(np.linalg.cond(J))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularAnchorError(f"reduced Jacobian condition number {cond:.3g}")
    lu = linalg.lu_factor(J)
    F_pcc = linalg.lu_solve(lu, K1)
    F_u = linalg.lu_solve(lu, K2)
    E = np.zeros((net.n_e, L))
    E[2 * net.n_nodes + L + np.arange(L), np.arange(L)] = 1.0
    F_x = -linalg.lu_solve(lu, E)
    return FixedPointModel(net, anchor.copy(), D, J, F_pcc, F_u, F_x, StateLayout(L), cond)


@dataclass(eq=False)
class BrouwerBox:
    """Box on the state deviation. Unset flow/balancing rows default to zero width."""

    V_lo: np.ndarray
    V_hi: np.ndarray
    I_lo: np.ndarray
    I_hi: np.ndarray
    P_lo: np.ndarray | None = None
    P_hi: np.ndarray | None = None
    Q_lo: np.ndarray | None = None
    Q_hi: np.ndarray | None = None
    beta_lo: np.ndarray | None = None
    beta_hi: np.ndarray | None = None

    def __post_init__(self):
        n = np.asarray(self.I_lo).size
        for name in ("V_lo", "V_hi", "I_lo", "I_hi", "P_lo", "P_hi", "Q_lo", "Q_hi"):
            v = getattr(self, name)
            setattr(self, name, np.zeros(n) if v is None else np.asarray(v, float).copy())
        for name in ("beta_lo", "beta_hi"):
            v = getattr(self, name)
            setattr(self, name, np.zeros(2) if v is None else np.asarray(v, float).copy())

    @property
    def lo(self):
        return np.concatenate([self.P_lo, self.Q_lo, self.V_lo, self.I_lo, self.beta_lo])

    @property
    def hi(self):
        return np.concatenate([self.P_hi, self.Q_hi, self.V_hi, self.I_hi, self.beta_hi])

    def scaled_vi(self, t):
        return replace(self, V_lo=t * self.V_lo, V_hi=t * self.V_hi, I_lo=t * self.I_lo,
                       I_hi=t * self.I_hi)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("P_lo", "P_hi", "Q_lo", "Q_hi", "V_lo",
                                                      "V_hi", "I_lo", "I_hi", "beta_lo", "beta_hi")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, float) for k, v in d.items()})


def start_voltage_box(net: Network, box: BrouwerBox):
    """Per-branch box of the start-node voltage deviation (zero for the root)."""
    pos = np.full(net.n_nodes, -1)
    pos[net.nonroot] = np.arange(net.n_nodes - 1)
    k = pos[net.br_from]
    lo = np.where(k >= 0, box.V_lo[np.maximum(k, 0)], 0.0)
    hi = np.where(k >= 0, box.V_hi[np.maximum(k, 0)], 0.0)
    return lo, hi


def residual_bounds(net: Network, box: BrouwerBox):
    """Corner bounds of the remainder over the box. Returns (Rmin, Rmax)."""
    pmin, pmax = quadratic_corner_bounds(box.P_lo, box.P_hi)
    qmin, qmax = quadratic_corner_bounds(box.Q_lo, box.Q_hi)
    vlo, vhi = start_voltage_box(net, box)
    bmin, bmax = bilinear_corner_bounds(vlo, vhi, box.I_lo, box.I_hi)
    return pmin + qmin + bmin, pmax + qmax + bmax


def check_brouwer_condition(model, box: BrouwerBox, Rmin, Rmax, tol=1e-12):
    """Width condition on the V/I rows: box width >= M+ (Rmax - Rmin).

    Returns (holds, slack) with slack = width - M+ (Rmax - Rmin) per row.
    """
    width = np.concatenate([box.V_hi - box.V_lo, box.I_hi - box.I_lo])
    slack = width - model.M_plus @ (np.asarray(Rmax, float) - np.asarray(Rmin, float))
    return bool(np.all(slack >= -tol)), slack


def image_bounds(model: FixedPointModel, Rmin, Rmax):
    """Offsets so that the map's image row k lies in U_k + [lo_off_k, hi_off_k]."""
    Fp = np.maximum(model.F_x, 0.0)
    Fm = np.minimum(model.F_x, 0.0)
    lo_off = Fm @ Rmax + Fp @ Rmin
    hi_off = Fp @ Rmax + Fm @ Rmin
    return lo_off, hi_off


def control_room(model: FixedPointModel, box: BrouwerBox):
    """Bounds on u_t for every control after reserving room for D @ beta."""
    net = model.net
    D = model.balancing
    dlo = np.minimum(D * box.beta_lo, D * box.beta_hi).sum(axis=1)
    dhi = np.maximum(D * box.beta_lo, D * box.beta_hi).sum(axis=1)
    lo = net.u_min - model.anchor.u - dlo
    hi = net.u_max - model.anchor.u - dhi
    return lo, hi


def flexible_controls(net: Network, eps=1e-12):
    return np.flatnonzero(net.u_max - net.u_min > eps)


@dataclass(eq=False)
class CertifiedBox:
    box: BrouwerBox
    Rmin: np.ndarray
    Rmax: np.ndarray
    b_min: np.ndarray
    b_max: np.ndarray
    ctrl_lo: np.ndarray
    ctrl_hi: np.ndarray
    flow_scale: float = 1.0
    vi_scale: float = 1.0
    slack: np.ndarray = field(default=None, repr=False)

    def feasible(self, tol=1e-12):
        return bool(np.all(self.b_min <= tol) and np.all(self.b_max >= -tol)
                    and np.all(self.ctrl_lo <= tol) and np.all(self.ctrl_hi >= -tol))


def certify(model: FixedPointModel, box: BrouwerBox) -> CertifiedBox:
    """Row bounds for a box; ``feasible()`` tells whether the anchor is inside."""
    Rmin, Rmax = residual_bounds(model.net, box)
    lo_off, hi_off = image_bounds(model, Rmin, Rmax)
    b_min = box.lo - lo_off
    b_max = box.hi - hi_off
    clo, chi = control_room(model, box)
    flex = flexible_controls(model.net)
    return CertifiedBox(box, Rmin, Rmax, b_min, b_max, clo[flex], chi[flex],
                        slack=b_max - b_min)


def flow_room(net: Network, u0):
    """How far each branch flow can move (down, up) by re-dispatching downstream controls."""
    u0 = np.asarray(u0, float)
    active, sign = net.control_kind()
    node = net.control_node()
    # flow increase: more downstream demand or less downstream generation
    up = np.where(sign < 0, net.u_max - u0, u0 - net.u_min)
    dn = np.where(sign < 0, u0 - net.u_min, net.u_max - u0)
    L = net.n_branches
    below = np.zeros((L, net.n_nodes), dtype=bool)
    for l in range(L):
        below[l, net.subtree_nodes(l)] = True
    at = below[:, node]
    out = {}
    for name, mask in (("P", active), ("Q", ~active)):
        out[name] = ((at & mask) @ dn, (at & mask) @ up)
    return out


def complete_box(model: FixedPointModel, vi_box: BrouwerBox, flow_scale=1.0, vi_scale=1.0,
                 flow_floor=0.05, beta_factor=1.0, max_iter=60) -> CertifiedBox | None:
    """Extend a V/I box with flow and balancing rows so the whole state maps into itself.

    Flow rows get the re-dispatch room of the downstream controls (times
    ``flow_scale``), a small floor proportional to the anchor flow, and an
    allowance for the remainder feeding back into the flows; the allowance is
    found by fixed-point iteration. Returns None when that iteration diverges.
    """
    net = model.net
    a = model.anchor
    L = net.n_branches
    base = vi_box.scaled_vi(vi_scale)
    room = flow_room(net, a.u)
    floor = flow_floor * (np.abs(a.P) + np.abs(a.Q) + 1e-3)
    pd, pu = flow_scale * room["P"][0] + floor, flow_scale * room["P"][1] + floor
    qd, qu = flow_scale * room["Q"][0] + floor, flow_scale * room["Q"][1] + floor
    M = model.M_full
    rP, rQ, rB = (model.layout.rows(k) for k in ("P", "Q", "beta"))
    m = np.zeros(4 * L + 2)
    box = base
    for _ in range(max_iter):
        box = replace(base, P_lo=-(pd + m[rP]), P_hi=pu + m[rP], Q_lo=-(qd + m[rQ]),
                      Q_hi=qu + m[rQ], beta_lo=-beta_factor * m[rB], beta_hi=beta_factor * m[rB])
        Rmin, Rmax = residual_bounds(net, box)
        m_new = M @ (Rmax - Rmin)
        if not np.all(np.isfinite(m_new)) or m_new.max(initial=0.0) > 1e3:
            return None
        if np.allclose(m_new, m, rtol=1e-10, atol=1e-14):
            m = m_new
            break
        m = m_new
    else:
        return None
    box = replace(base, P_lo=-(pd + m[rP]), P_hi=pu + m[rP], Q_lo=-(qd + m[rQ]),
                  Q_hi=qu + m[rQ], beta_lo=-beta_factor * m[rB], beta_hi=beta_factor * m[rB])
    cb = certify(model, box)
    cb.flow_scale, cb.vi_scale = flow_scale, vi_scale
    return cb


def search_box(model: FixedPointModel, vi_boxes, score, flow_scales=(1.0, 0.5, 0.25, 0.1, 0.03, 0.0),
               bisect_steps=30):
    """Pick the completed box with the best ``score`` over flow scales and V/I scalings.

    For each candidate V/I box and flow scale the largest V/I scaling in (0, 1]
    whose completed box contains the anchor is found by bisection.
    """
    best, best_score = None, -np.inf
    for vi_box in vi_boxes:
        for gamma in flow_scales:
            def ok(t):
                cb = complete_box(model, vi_box, gamma, t)
                return cb if cb is not None and cb.feasible() else None
            cb = ok(1.0)
            if cb is None:
                lo, hi = 0.0, 1.0
                for _ in range(bisect_steps):
                    mid = 0.5 * (lo + hi)
                    c = ok(mid)
                    if c is not None:
                        lo, cb = mid, c
                    else:
                        hi = mid
                if cb is None:
                    continue
            s = score(cb)
            log.debug("box candidate flow_scale=%g vi_scale=%.4g score=%.4g", gamma, cb.vi_scale, s)
            if s > best_score + 1e-15:
                best, best_score = cb, s
    return best


def build_omega_polytope(model: FixedPointModel, cb: CertifiedBox, tol=1e-12) -> Polytope:
    """Linear constraints on (upcc_t, u_t over flexible controls) certified by ``cb``.

    Refuses (BrouwerConditionError) when some row is empty, i.e. when the box
    cannot map into itself.
    """
    if np.any(cb.b_min > cb.b_max + tol):
        raise BrouwerConditionError("certified box has empty rows; the self-map condition fails")
    flex = flexible_controls(model.net)
    A_state = np.hstack([model.F_pcc, model.F_u[:, flex]])
    return omega_from_bounds(A_state, cb.b_min, cb.b_max, cb.ctrl_lo, cb.ctrl_hi)


def omega_from_bounds(A_state, b_min, b_max, ctrl_lo, ctrl_hi):
    nf = ctrl_lo.size
    Ac = np.hstack([np.zeros((nf, 2)), np.eye(nf)])
    A = np.vstack([A_state, -A_state, Ac, -Ac])
    b = np.concatenate([b_max, -b_min, ctrl_hi, -ctrl_lo])
    finite = np.isfinite(b)
    return Polytope(A[finite], b[finite])
