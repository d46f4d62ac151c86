"""Radial distribution network model in DistFlow form.

Voltages and currents are carried as squared magnitudes (p.u.^2). The state
vector is ``x = (P, Q, V, I)`` with branch flows P, Q (n_L each), nodal squared
voltages V (n_N, root included) and branch squared currents I (n_L).

The equality residual has four blocks, in this order:

1. active balance at every node
2. reactive balance at every node
3. voltage drop along every branch
4. current definition on every branch, written ``V_from * I - P**2 - Q**2``

and satisfies ``residual = f(x) - K1 @ u_pcc - K2 @ u`` where ``u`` stacks the
generator and demand set-points ``(P_G, Q_G, P_N, Q_N)`` and ``u_pcc`` is the
power imported at the root. Because the last block is quadratic, the exact
expansion around any point is::

    f(x0 + dx) = f(x0) + J(x0) @ dx + [0; r(dx)]
    r(dx) = -dP**2 - dQ**2 + dV_from * dI

which is what ``second_order_residual`` returns.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)


class NetworkError(ValueError):
    """Malformed or non-radial network data."""


class SingularSystemError(RuntimeError):
    """A Newton step hit a numerically singular Jacobian."""


@dataclass(frozen=True, eq=False)
class Network:
    """Radial network with nodes, oriented branches and controllable generators.

    All arrays are indexed in file order. Branch arrays are oriented away from
    the root (``br_from`` is the upstream end).
    """

    node_ids: tuple
    v_min: np.ndarray
    v_max: np.ndarray
    pd_min: np.ndarray
    pd_max: np.ndarray
    qd_min: np.ndarray
    qd_max: np.ndarray
    pd_nom: np.ndarray
    qd_nom: np.ndarray
    br_from: np.ndarray
    br_to: np.ndarray
    r: np.ndarray
    x: np.ndarray
    i_min: np.ndarray
    i_max: np.ndarray
    gen_node: np.ndarray
    pg_min: np.ndarray
    pg_max: np.ndarray
    qg_min: np.ndarray
    qg_max: np.ndarray
    pg_nom: np.ndarray
    qg_nom: np.ndarray
    gen_cost: np.ndarray  # (n_G, 2): linear and quadratic coefficient on P_G
    root: int = 0
    v_root: float = 1.0
    base_mva: float = 1.0
    name: str = "network"
    branch_ids: tuple = ()
    gen_ids: tuple = ()
    incoming: np.ndarray = field(init=False, repr=False)
    children: tuple = field(init=False, repr=False)
    depth_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_n = len(self.node_ids)
        cast = {}
        for name in ("v_min", "v_max", "pd_min", "pd_max", "qd_min", "qd_max", "pd_nom",
                     "qd_nom", "r", "x", "i_min", "i_max", "pg_min", "pg_max", "qg_min",
                     "qg_max", "pg_nom", "qg_nom"):
            cast[name] = np.asarray(getattr(self, name), dtype=float).ravel()
        for name in ("br_from", "br_to", "gen_node"):
            cast[name] = np.asarray(getattr(self, name), dtype=int).ravel()
        cast["gen_cost"] = np.asarray(self.gen_cost, dtype=float).reshape(-1, 2)
        for k, v in cast.items():
            object.__setattr__(self, k, v)
        n_l = self.br_from.size
        if not self.branch_ids:
            object.__setattr__(self, "branch_ids", tuple(range(n_l)))
        if not self.gen_ids:
            object.__setattr__(self, "gen_ids", tuple(range(self.gen_node.size)))
        for name in ("v_min", "v_max", "pd_min", "pd_max", "qd_min", "qd_max", "pd_nom", "qd_nom"):
            if getattr(self, name).size != n_n:
                raise NetworkError(f"{name} must have one entry per node")
        if n_l != n_n - 1:
            raise NetworkError(f"a radial network with {n_n} nodes needs {n_n - 1} branches, got {n_l}")
        if not 0 <= self.root < n_n:
            raise NetworkError("root index out of range")
        incoming = np.full(n_n, -1, dtype=int)
        for l, (i, j) in enumerate(zip(self.br_from, self.br_to)):
            if not (0 <= i < n_n and 0 <= j < n_n) or i == j:
                raise NetworkError(f"branch {self.branch_ids[l]} has invalid endpoints")
            if incoming[j] >= 0 or j == self.root:
                raise NetworkError(f"branch {self.branch_ids[l]} is not oriented away from the root")
            incoming[j] = l
        children = [[] for _ in range(n_n)]
        for l, i in enumerate(self.br_from):
            children[i].append(l)
        # breadth-first order from the root; also detects disconnected parts
        order, seen = [self.root], {self.root}
        k = 0
        while k < len(order):
            for l in children[order[k]]:
                j = int(self.br_to[l])
                if j in seen:
                    raise NetworkError("network contains a loop")
                seen.add(j)
                order.append(j)
            k += 1
        if len(order) != n_n:
            raise NetworkError("network is not connected or not radial")
        object.__setattr__(self, "incoming", incoming)
        object.__setattr__(self, "children", tuple(tuple(c) for c in children))
        object.__setattr__(self, "depth_order", np.asarray(order, dtype=int))
        if np.any(self.v_min > self.v_max) or np.any(self.v_min <= 0):
            raise NetworkError("voltage limits must satisfy 0 < V_min <= V_max")
        if np.any(self.i_min > self.i_max) or np.any(self.i_min < 0):
            raise NetworkError("current limits must satisfy 0 <= I_min <= I_max")
        if np.any(self.r < 0) or np.any(self.x < 0) or np.any(self.r + self.x <= 0):
            raise NetworkError("branch impedances must be non-negative and not both zero")
        for lo, hi in ((self.pd_min, self.pd_max), (self.qd_min, self.qd_max),
                       (self.pg_min, self.pg_max), (self.qg_min, self.qg_max)):
            if np.any(lo > hi):
                raise NetworkError("control lower bound exceeds upper bound")
        if self.gen_cost.shape[0] != self.gen_node.size:
            raise NetworkError("gen_cost must have one row per generator")

    # sizes -----------------------------------------------------------------
    @property
    def n_nodes(self):
        return len(self.node_ids)

    @property
    def n_branches(self):
        return self.br_from.size

    @property
    def n_gens(self):
        return self.gen_node.size

    @property
    def n_x(self):
        return 3 * self.n_branches + self.n_nodes

    @property
    def n_e(self):
        return 2 * self.n_branches + 2 * self.n_nodes

    @property
    def n_u(self):
        return 2 * self.n_gens + 2 * self.n_nodes

    @property
    def nonroot(self):
        return np.delete(np.arange(self.n_nodes), self.root)

    # control vector helpers ------------------------------------------------
    @property
    def u_min(self):
        return np.concatenate([self.pg_min, self.qg_min, self.pd_min, self.qd_min])

    @property
    def u_max(self):
        return np.concatenate([self.pg_max, self.qg_max, self.pd_max, self.qd_max])

    @property
    def u_nominal(self):
        return np.concatenate([self.pg_nom, self.qg_nom, self.pd_nom, self.qd_nom])

    def control_slices(self):
        g, n = self.n_gens, self.n_nodes
        return {"pg": slice(0, g), "qg": slice(g, 2 * g), "pd": slice(2 * g, 2 * g + n),
                "qd": slice(2 * g + n, 2 * g + 2 * n)}

    def control_kind(self):
        """Per control: (is_active_power, injection_sign). Demand has sign -1."""
        g, n = self.n_gens, self.n_nodes
        active = np.concatenate([np.ones(g), np.zeros(g), np.ones(n), np.zeros(n)]).astype(bool)
        sign = np.concatenate([np.ones(2 * g), -np.ones(2 * n)])
        return active, sign

    def control_node(self):
        return np.concatenate([self.gen_node, self.gen_node, np.arange(self.n_nodes),
                               np.arange(self.n_nodes)])

    def state_slices(self):
        L, N = self.n_branches, self.n_nodes
        return {"P": slice(0, L), "Q": slice(L, 2 * L), "V": slice(2 * L, 2 * L + N),
                "I": slice(2 * L + N, 3 * L + N)}

    def subtree_nodes(self, l):
        """Nodes at or below the downstream end of branch l."""
        out, stack = [], [int(self.br_to[l])]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(int(self.br_to[k]) for k in self.children[j])
        return sorted(out)


@dataclass(eq=False)
class OperatingPoint:
    """A (not necessarily feasible) full operating point."""

    P: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    I: np.ndarray
    u: np.ndarray
    pcc: np.ndarray

    @property
    def x(self):
        return np.concatenate([self.P, self.Q, self.V, self.I])

    @classmethod
    def from_state(cls, net: Network, x, u, pcc):
        x = np.asarray(x, dtype=float)
        s = net.state_slices()
        return cls(x[s["P"]].copy(), x[s["Q"]].copy(), x[s["V"]].copy(), x[s["I"]].copy(),
                   np.asarray(u, dtype=float).copy(), np.asarray(pcc, dtype=float).copy())

    def copy(self):
        return OperatingPoint(self.P.copy(), self.Q.copy(), self.V.copy(), self.I.copy(),
                              self.u.copy(), self.pcc.copy())


@dataclass
class LimitReport:
    voltage: float
    current: float
    control: float
    violated: list

    @property
    def worst(self):
        return max(self.voltage, self.current, self.control)

    def clean(self, tol=0.0):
        return self.worst <= tol


# ---------------------------------------------------------------------------
# equations

def pcc_incidence(net: Network):
    """K1, shape (n_e, 2)."""
    N = net.n_nodes
    K1 = np.zeros((net.n_e, 2))
    K1[net.root, 0] = -1.0
    K1[N + net.root, 1] = -1.0
    return K1


def control_incidence(net: Network):
    """K2, shape (n_e, n_u)."""
    N, G = net.n_nodes, net.n_gens
    K2 = np.zeros((net.n_e, net.n_u))
    g = np.arange(G)
    K2[net.gen_node, g] = -1.0
    K2[N + net.gen_node, G + g] = -1.0
    n = np.arange(N)
    K2[n, 2 * G + n] = 1.0
    K2[N + n, 2 * G + N + n] = 1.0
    return K2


def f_state(net: Network, x):
    """The state-only part f(x) of the residual."""
    x = np.asarray(x, dtype=float)
    L, N = net.n_branches, net.n_nodes
    s = net.state_slices()
    P, Q, V, I = x[s["P"]], x[s["Q"]], x[s["V"]], x[s["I"]]
    fr, to = net.br_from, net.br_to
    out = np.empty(net.n_e)
    # flow into j minus losses minus flows leaving j
    bal_p = np.zeros(N)
    bal_q = np.zeros(N)
    np.add.at(bal_p, to, P - net.r * I)
    np.add.at(bal_q, to, Q - net.x * I)
    np.add.at(bal_p, fr, -P)
    np.add.at(bal_q, fr, -Q)
    out[:N] = bal_p
    out[N:2 * N] = bal_q
    z2 = net.r ** 2 + net.x ** 2
    out[2 * N:2 * N + L] = V[fr] - V[to] - 2 * (net.r * P + net.x * Q) + z2 * I
    out[2 * N + L:] = V[fr] * I - P ** 2 - Q ** 2
    return out


def residual_f(net: Network, point: OperatingPoint):
    """Equality residual, zero at a power-flow solution."""
    return _residual(net, point.x, point.u, point.pcc)


def _residual(net, x, u, pcc):
    return f_state(net, x) - pcc_incidence(net) @ np.asarray(pcc, float) \
        - control_incidence(net) @ np.asarray(u, float)


def jacobian_f(net: Network, point_or_x):
    """Dense Jacobian of f with respect to x, shape (n_e, n_x)."""
    x = point_or_x.x if isinstance(point_or_x, OperatingPoint) else np.asarray(point_or_x, float)
    L, N = net.n_branches, net.n_nodes
    s = net.state_slices()
    P, Q, V, I = x[s["P"]], x[s["Q"]], x[s["V"]], x[s["I"]]
    iP, iQ, iV, iI = (np.arange(L), L + np.arange(L), 2 * L + np.arange(N),
                      2 * L + N + np.arange(L))
    fr, to, l = net.br_from, net.br_to, np.arange(L)
    J = np.zeros((net.n_e, net.n_x))
    J[to, iP] += 1.0
    J[fr, iP] -= 1.0
    J[to, iI] -= net.r
    J[N + to, iQ] += 1.0
    J[N + fr, iQ] -= 1.0
    J[N + to, iI] -= net.x
    r3 = 2 * N + l
    J[r3, iV[fr]] = 1.0
    J[r3, iV[to]] = -1.0
    J[r3, iP] = -2 * net.r
    J[r3, iQ] = -2 * net.x
    J[r3, iI] = net.r ** 2 + net.x ** 2
    r4 = 2 * N + L + l
    J[r4, iP] = -2 * P
    J[r4, iQ] = -2 * Q
    J[r4, iV[fr]] = I
    J[r4, iI] = V[fr]
    return J


def second_order_residual(net: Network, dx):
    """Remainder r(dx) of the current-definition block (length n_L)."""
    dx = np.asarray(dx, dtype=float)
    s = net.state_slices()
    dP, dQ, dV, dI = dx[s["P"]], dx[s["Q"]], dx[s["V"]], dx[s["I"]]
    return -dP ** 2 - dQ ** 2 + dV[net.br_from] * dI


# ---------------------------------------------------------------------------
# Newton solve

@dataclass
class NewtonResult:
    point: OperatingPoint
    converged: bool
    iterations: int
    residual: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))


def flat_start(net: Network, u=None):
    """Loss-free initial guess: flows from downstream net demand, flat voltage."""
    u = net.u_nominal if u is None else np.asarray(u, float)
    sl = net.control_slices()
    p_inj = np.zeros(net.n_nodes)
    q_inj = np.zeros(net.n_nodes)
    np.add.at(p_inj, net.gen_node, u[sl["pg"]])
    np.add.at(q_inj, net.gen_node, u[sl["qg"]])
    p_net = u[sl["pd"]] - p_inj
    q_net = u[sl["qd"]] - q_inj
    P = np.zeros(net.n_branches)
    Q = np.zeros(net.n_branches)
    for j in net.depth_order[::-1]:
        l = net.incoming[j]
        if l < 0:
            continue
        P[l] = p_net[j] + sum(P[k] for k in net.children[j])
        Q[l] = q_net[j] + sum(Q[k] for k in net.children[j])
    V = np.full(net.n_nodes, net.v_root)
    I = (P ** 2 + Q ** 2) / net.v_root
    pcc = np.array([p_net.sum(), q_net.sum()])
    return OperatingPoint(P, Q, V, I, u.copy(), pcc)


def newton_solve(net: Network, u, mode="free", pcc=None, init: OperatingPoint | None = None,
                 balancing=None, tol=1e-8, max_iter=50, damping_steps=10) -> NewtonResult:
    """Solve the DistFlow equations with the root voltage held at ``net.v_root``.

    mode="free": u is given, u_pcc is an output.
    mode="fixed": u_pcc is given; the controls actually applied are
    ``u + balancing @ beta`` with the balancing amounts beta solved for. With
    fewer than two balancing columns the system is overdetermined and a
    Gauss-Newton iteration is used; it only converges at consistent points.
    """
    u = np.asarray(u, dtype=float)
    L, N = net.n_branches, net.n_nodes
    keep = np.delete(np.arange(net.n_x), 2 * L + net.root)
    K1 = pcc_incidence(net)
    K2 = control_incidence(net)
    start = init if init is not None else flat_start(net, u)
    x = start.x.copy()
    x[2 * L + net.root] = net.v_root
    if mode == "free":
        extra = start.pcc.copy() if init is not None else flat_start(net, u).pcc
        extra_cols = -K1
    elif mode == "fixed":
        if pcc is None:
            raise ValueError("fixed mode needs pcc")
        pcc = np.asarray(pcc, dtype=float)
        D_full = np.zeros((net.n_u, 0)) if balancing is None else np.asarray(balancing, float)
        D_full = D_full.reshape(net.n_u, -1)
        live = np.flatnonzero(np.abs(D_full).sum(axis=0) > 0)
        D = D_full[:, live]
        extra = np.zeros(live.size)
        extra_cols = -K2 @ D
    else:
        raise ValueError(f"unknown mode {mode!r}")

    def unpack(z):
        xx = x.copy()
        xx[keep] = z[:keep.size]
        return xx, z[keep.size:]

    def res(z):
        xx, e = unpack(z)
        if mode == "free":
            return _residual(net, xx, u, e)
        return _residual(net, xx, u + D @ e, pcc)

    z = np.concatenate([x[keep], extra])
    r = res(z)
    nr = np.linalg.norm(r, np.inf)
    it = 0
    square = z.size == net.n_e
    while nr > tol and it < max_iter:
        xx, _ = unpack(z)
        J = np.hstack([jacobian_f(net, xx)[:, keep], extra_cols])
        if square:
            try:
                lu = linalg.lu_factor(J, check_finite=True)
            except (ValueError, linalg.LinAlgError) as exc:
                raise SingularSystemError(str(exc)) from exc
            if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(J).max())):
                raise SingularSystemError("singular Newton Jacobian")
            step = linalg.lu_solve(lu, -r)
        else:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        alpha = 1.0
        for _ in range(damping_steps + 1):
            z_try = z + alpha * step
            r_try = res(z_try)
            n_try = np.linalg.norm(r_try, np.inf)
            if np.isfinite(n_try) and n_try < nr:
                break
            alpha *= 0.5
        else:
            break
        z, r, nr = z_try, r_try, n_try
        it += 1
    xx, e = unpack(z)
    if mode == "free":
        pt = OperatingPoint.from_state(net, xx, u, e)
        beta = np.zeros(0)
    else:
        pt = OperatingPoint.from_state(net, xx, u + D @ e, pcc)
        beta = np.zeros(D_full.shape[1])
        beta[live] = e
    ok = bool(np.isfinite(nr) and nr <= tol)
    return NewtonResult(pt, ok, it, float(nr), beta)


def limit_check(net: Network, point: OperatingPoint, tol=0.0) -> LimitReport:
    """Worst violations of voltage, current and control limits (0 when clean)."""
    v = np.maximum(net.v_min - point.V, point.V - net.v_max)
    i = np.maximum(net.i_min - point.I, point.I - net.i_max)
    c = np.maximum(net.u_min - point.u, point.u - net.u_max)
    violated = [("V", int(k)) for k in np.flatnonzero(v > tol)]
    violated += [("I", int(k)) for k in np.flatnonzero(i > tol)]
    violated += [("u", int(k)) for k in np.flatnonzero(c > tol)]
    return LimitReport(float(max(v.max(initial=0.0), 0.0)), float(max(i.max(initial=0.0), 0.0)),
                       float(max(c.max(initial=0.0), 0.0)), violated)


def participation(net: Network, u0, eps=1e-9):
    """Balancing matrix D (n_u x k) for the anchor controls ``u0``.

    Column 0 spreads an active-power injection change over the controls with
    room in both directions, weighted by that room; column 1 does the same for
    reactive power. A column is zero when no control has room.
    """
    u0 = np.asarray(u0, float)
    room = np.minimum(u0 - net.u_min, net.u_max - u0)
    room = np.where(room > eps, room, 0.0)
    active, sign = net.control_kind()
    D = np.zeros((net.n_u, 2))
    for k, mask in enumerate((active, ~active)):
        w = np.where(mask, room, 0.0)
        if w.sum() > 0:
            D[:, k] = sign * w / w.sum()
    return D
