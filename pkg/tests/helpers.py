"""Random instance generators shared by the unit and acceptance tests."""
import numpy as np

from vppregion.coordination import (CoordinationProblem, CostSurface, DcTransmission, VppRegion)
from vppregion.epsolver import BranchEpProblem
from vppregion.geometry import PccPolygon, Polytope
from vppregion.networks import network_from_dict


def random_network(rng, n_nodes=None, n_gens=None):
    """Random radial feeder with loads on every non-root node and a few DERs."""
    n = int(n_nodes or rng.integers(3, 9))
    nodes = [{"id": 0, "v_min": 0.81, "v_max": 1.21, "p_demand": [0, 0], "q_demand": [0, 0]}]
    for k in range(1, n):
        p = float(rng.uniform(0.0, 0.04))
        q = float(rng.uniform(0.0, 0.015))
        nodes.append({"id": k, "v_min": 0.81, "v_max": 1.21, "p_demand": [p, p],
                      "q_demand": [q, q]})
    branches = []
    for k in range(1, n):
        parent = int(rng.integers(0, k))
        branches.append({"id": k, "from": parent, "to": k, "r": float(rng.uniform(0.005, 0.05)),
                         "x": float(rng.uniform(0.005, 0.05)), "i_max": 1.0})
    g = int(n_gens if n_gens is not None else rng.integers(1, 3))
    at = rng.choice(np.arange(1, n), size=min(g, n - 1), replace=False)
    gens = [{"id": f"g{k}", "node": int(j), "p": [0.0, float(rng.uniform(0.03, 0.1))],
             "q": [-0.03, 0.03], "cost": [float(rng.uniform(5, 30)), 0.0]}
            for k, j in enumerate(at)]
    return network_from_dict({"name": "random", "voltage_quantity": "squared", "root": 0,
                              "nodes": nodes, "branches": branches, "generators": gens})


def random_state(rng, net, spread=1.0):
    s = net.state_slices()
    x = rng.normal(scale=spread, size=net.n_x)
    x[s["V"]] = 1.0 + 0.1 * rng.normal(size=net.n_nodes)
    return x


def random_ep_problem(rng, k=1):
    """Single-branch (k=1) or grouped box problem with random room and weights."""
    return BranchEpProblem(-rng.uniform(0, 0.2), rng.uniform(0, 0.2),
                           -rng.uniform(0, 0.2, k), rng.uniform(0, 0.2, k),
                           rng.uniform(0, 20, k) * (rng.random(k) < 0.9),
                           rng.uniform(0.2, 5, k))


def random_polytope(rng, d):
    """Bounded polytope in R^d with the origin strictly inside."""
    m = int(rng.integers(d + 2, 3 * d + 4))
    A = rng.normal(size=(m, d))
    b = rng.uniform(0.2, 1.0, m)
    box = np.vstack([np.eye(d), -np.eye(d)])
    return Polytope(np.vstack([A, box]), np.concatenate([b, rng.uniform(1.0, 2.0, 2 * d)]))


def random_polygon(rng, center, radius):
    pts = center + radius * rng.uniform(-1, 1, (int(rng.integers(3, 7)), 2))
    return PccPolygon.from_vertices(pts)


def random_surface(rng, lo=-1.0):
    k = int(rng.integers(1, 4))
    return CostSurface(rng.uniform(-3, 3, (k, 2)), rng.uniform(lo, 3, k))


def random_transmission(rng, n_vpp):
    nb = int(rng.integers(3, 6))
    lines = [(int(rng.integers(0, k)), k) for k in range(1, nb)]
    extra = int(rng.integers(0, 3))
    for _ in range(extra):
        a, b = rng.choice(nb, 2, replace=False)
        lines.append((int(a), int(b)))
    nu = int(rng.integers(1, 4))
    units = rng.integers(0, nb, nu)
    unit_cost = []
    for _ in range(nu):
        # convex: slopes increasing with intercepts chosen by breakpoints
        slopes = np.sort(rng.uniform(5, 50, int(rng.integers(1, 4))))
        bps = np.sort(rng.uniform(0, 2, slopes.size - 1))
        icpt = [0.0]
        for j in range(1, slopes.size):
            icpt.append(icpt[-1] + (slopes[j - 1] - slopes[j]) * bps[j - 1])
        unit_cost.append(np.column_stack([slopes, icpt]))
    limits = np.where(rng.random(len(lines)) < 0.5, rng.uniform(0.3, 2.0, len(lines)), np.inf)
    return DcTransmission(
        bus_ids=tuple(range(nb)), demand=rng.uniform(0, 1.0, nb), reference=0,
        line_from=[a for a, _ in lines], line_to=[b for _, b in lines],
        susceptance=rng.uniform(5, 20, len(lines)), limit=limits,
        unit_bus=units, unit_min=np.zeros(nu), unit_max=rng.uniform(1.5, 4.0, nu),
        unit_cost=unit_cost, vpp_bus=rng.integers(0, nb, n_vpp),
        vpp_scale=rng.uniform(0.1, 1.0, n_vpp),
        pcc_lo=np.column_stack([rng.uniform(-3, -0.5, n_vpp), np.full(n_vpp, -np.inf)]),
        pcc_hi=np.column_stack([rng.uniform(0.5, 3, n_vpp), np.full(n_vpp, np.inf)]))


def random_coordination(rng, max_vpp=3, max_regions=4):
    n_vpp = int(rng.integers(1, max_vpp + 1))
    tr = random_transmission(rng, n_vpp)
    vpps = []
    for _ in range(n_vpp):
        regs = []
        for _ in range(int(rng.integers(1, max_regions + 1))):
            poly = random_polygon(rng, rng.uniform(-1.5, 1.5, 2), rng.uniform(0.1, 0.8))
            regs.append(VppRegion.from_polygon(poly, random_surface(rng)))
        vpps.append(regs)
    return CoordinationProblem(tr, vpps)
