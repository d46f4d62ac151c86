"""Network files, the MATPOWER converter and the bundled test networks.

Network JSON layout::

    {"format": "vppregion-network", "version": 1, "name": "...",
     "base_mva": 10.0, "voltage_quantity": "squared",
     "root": 1, "v_root": 1.0,
     "nodes": [{"id": 1, "v_min": 0.81, "v_max": 1.21,
                "p_demand": [lo, hi], "q_demand": [lo, hi],
                "p_nominal": p, "q_nominal": q}, ...],
     "branches": [{"id": 1, "from": 1, "to": 2, "r": ..., "x": ...,
                   "i_min": 0.0, "i_max": ...}, ...],
     "generators": [{"id": "g1", "node": 18, "p": [lo, hi], "q": [lo, hi],
                     "p_nominal": p, "q_nominal": q, "cost": [c1, c2]}, ...]}

Everything is per unit on ``base_mva``. ``voltage_quantity`` must be given:
with "squared" the voltage limits, ``v_root`` and current limits are squared
magnitudes; with "magnitude" they are plain magnitudes and are squared on
load. Branches may be listed in either direction; they are re-oriented away
from the root.
"""
from __future__ import annotations

import json
import re
from collections import deque
from importlib import resources
from pathlib import Path

import numpy as np

from .netmodel import Network, NetworkError, flat_start, newton_solve

FORMAT = "vppregion-network"


def network_from_dict(d) -> Network:
    if d.get("format", FORMAT) != FORMAT:
        raise NetworkError(f"not a network file (format={d.get('format')!r})")
    quantity = d.get("voltage_quantity")
    if quantity not in ("squared", "magnitude"):
        raise NetworkError("network file must declare voltage_quantity as 'squared' or 'magnitude'")
    sq = (lambda v: float(v) ** 2) if quantity == "magnitude" else float
    nodes = d["nodes"]
    ids = [n["id"] for n in nodes]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate node ids")
    pos = {nid: k for k, nid in enumerate(ids)}
    root = pos.get(d["root"])
    if root is None:
        raise NetworkError("root node not found")

    def rng(rec, key, nominal_key):
        lo, hi = (float(v) for v in rec.get(key, [0.0, 0.0]))
        nom = float(rec.get(nominal_key, 0.5 * (lo + hi)))
        return lo, hi, nom

    pd = np.array([rng(n, "p_demand", "p_nominal") for n in nodes]).reshape(-1, 3)
    qd = np.array([rng(n, "q_demand", "q_nominal") for n in nodes]).reshape(-1, 3)
    branches = d["branches"]
    ends = []
    for b in branches:
        if b["from"] not in pos or b["to"] not in pos:
            raise NetworkError(f"branch {b.get('id')} references an unknown node")
        ends.append((pos[b["from"]], pos[b["to"]]))
    oriented = orient_branches(len(ids), root, ends)
    gens = d.get("generators", [])
    for g in gens:
        if g["node"] not in pos:
            raise NetworkError(f"generator {g.get('id')} references an unknown node")
    pg = np.array([rng(g, "p", "p_nominal") for g in gens]).reshape(-1, 3)
    qg = np.array([rng(g, "q", "q_nominal") for g in gens]).reshape(-1, 3)
    cost = np.array([list(g.get("cost", [0.0, 0.0])) + [0.0] * (2 - len(g.get("cost", [0.0, 0.0])))
                     for g in gens], dtype=float).reshape(-1, 2)
    return Network(
        node_ids=tuple(ids),
        v_min=[sq(n["v_min"]) for n in nodes], v_max=[sq(n["v_max"]) for n in nodes],
        pd_min=pd[:, 0], pd_max=pd[:, 1], pd_nom=pd[:, 2],
        qd_min=qd[:, 0], qd_max=qd[:, 1], qd_nom=qd[:, 2],
        br_from=[f for f, _ in oriented], br_to=[t for _, t in oriented],
        r=[float(b["r"]) for b in branches], x=[float(b["x"]) for b in branches],
        i_min=[sq(b.get("i_min", 0.0)) for b in branches],
        i_max=[sq(b["i_max"]) for b in branches],
        gen_node=[pos[g["node"]] for g in gens],
        pg_min=pg[:, 0], pg_max=pg[:, 1], pg_nom=pg[:, 2],
        qg_min=qg[:, 0], qg_max=qg[:, 1], qg_nom=qg[:, 2],
        gen_cost=cost, root=root, v_root=sq(d.get("v_root", 1.0)),
        base_mva=float(d.get("base_mva", 1.0)), name=str(d.get("name", "network")),
        branch_ids=tuple(b.get("id", k) for k, b in enumerate(branches)),
        gen_ids=tuple(g.get("id", k) for k, g in enumerate(gens)))


def network_to_dict(net: Network):
    ids = list(net.node_ids)
    return {
        "format": FORMAT, "version": 1, "name": net.name, "base_mva": net.base_mva,
        "voltage_quantity": "squared", "root": ids[net.root], "v_root": net.v_root,
        "nodes": [{"id": ids[k], "v_min": float(net.v_min[k]), "v_max": float(net.v_max[k]),
                   "p_demand": [float(net.pd_min[k]), float(net.pd_max[k])],
                   "q_demand": [float(net.qd_min[k]), float(net.qd_max[k])],
                   "p_nominal": float(net.pd_nom[k]), "q_nominal": float(net.qd_nom[k])}
                  for k in range(net.n_nodes)],
        "branches": [{"id": net.branch_ids[l], "from": ids[net.br_from[l]], "to": ids[net.br_to[l]],
                      "r": float(net.r[l]), "x": float(net.x[l]),
                      "i_min": float(net.i_min[l]), "i_max": float(net.i_max[l])}
                     for l in range(net.n_branches)],
        "generators": [{"id": net.gen_ids[g], "node": ids[net.gen_node[g]],
                        "p": [float(net.pg_min[g]), float(net.pg_max[g])],
                        "q": [float(net.qg_min[g]), float(net.qg_max[g])],
                        "p_nominal": float(net.pg_nom[g]), "q_nominal": float(net.qg_nom[g]),
                        "cost": [float(c) for c in net.gen_cost[g]]}
                       for g in range(net.n_gens)],
    }


def load_network(path) -> Network:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return network_from_dict(d)
    except (KeyError, TypeError) as exc:
        raise NetworkError(f"{path}: missing or malformed field {exc}") from exc


def save_network(net: Network, path):
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)


def orient_branches(n_nodes, root, ends):
    """Return (from, to) pairs oriented away from ``root``; raise if not a tree."""
    adj = [[] for _ in range(n_nodes)]
    for k, (a, b) in enumerate(ends):
        adj[a].append((b, k))
        adj[b].append((a, k))
    out = [None] * len(ends)
    seen = {root}
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j, k in adj[i]:
            if out[k] is not None:
                continue
            if j in seen:
                raise NetworkError("network contains a loop")
            out[k] = (i, j)
            seen.add(j)
            queue.append(j)
    if len(seen) != n_nodes or any(o is None for o in out):
        raise NetworkError("network is not connected")
    return out


# ---------------------------------------------------------------------------
# MATPOWER import

def _matrix(text, name):
    m = re.search(r"mpc\." + name + r"\s*=\s*\[(.*?)\];", text, re.S)
    if m is None:
        raise NetworkError(f"mpc.{name} table not found")
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";").strip()
        if line:
            rows.append([float(v) for v in line.split()])
    return np.array(rows)


def read_matpower(path, ohms=None, kw=None):
    """Parse bus and branch tables of a MATPOWER case file.

    Returns dict with base_mva, bus (id, pd, qd, vmax, vmin, base_kv, type),
    branch (from, to, r, x, rate_a) in per unit with open branches removed.
    ``ohms``/``kw`` default to what the file's own comments declare.
    """
    text = Path(path).read_text()
    base = float(re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)", text).group(1))
    bus = _matrix(text, "bus")
    br = _matrix(text, "branch")
    if kw is None:
        kw = "kW" in text
    if ohms is None:
        ohms = "ohms" in text.lower()
    pd, qd = bus[:, 2].copy(), bus[:, 3].copy()
    if kw:
        pd /= 1e3
        qd /= 1e3
    br = br[br[:, 10] > 0]  # drop open tie lines
    r, x = br[:, 2].copy(), br[:, 3].copy()
    if ohms:
        vbase = bus[0, 9] * 1e3
        zbase = vbase ** 2 / (base * 1e6)
        r /= zbase
        x /= zbase
    return {"base_mva": base,
            "bus": {"id": bus[:, 0].astype(int), "pd": pd / base, "qd": qd / base,
                    "vmax": bus[:, 11], "vmin": bus[:, 12], "type": bus[:, 1].astype(int)},
            "branch": {"from": br[:, 0].astype(int), "to": br[:, 1].astype(int), "r": r, "x": x,
                       "rate_a": br[:, 5] / base}}


def network_from_matpower(path, ders=(), v_limits=None, name=None, rating_margin=1.25,
                          rating_floor=0.05, case_ratings=True):
    """Build a Network from a MATPOWER case plus a list of DER records.

    Each DER record is ``{"node", "p": [lo, hi], "q": [lo, hi]}`` in per unit,
    optionally with "p_nominal", "q_nominal", "cost". Demands are fixed at
    the case values. Branches without a rating get an apparent-power rating
    of ``rating_margin`` times the downstream demand plus the downstream DER
    capacity (at least ``rating_floor``), turned into a squared-current
    limit at the lowest allowed voltage. ``case_ratings=False`` ignores the
    ratings in the file.
    """
    mp = read_matpower(path)
    bus, br = mp["bus"], mp["branch"]
    ids = [int(v) for v in bus["id"]]
    root_id = ids[int(np.flatnonzero(bus["type"] == 3)[0])]
    vmin = bus["vmin"].copy()
    vmax = bus["vmax"].copy()
    if v_limits is not None:
        vmin[:] = v_limits[0]
        vmax[:] = v_limits[1]
    # the root row of MATPOWER cases pins Vmin = Vmax = 1; widen it to the feeder limits
    k0 = ids.index(root_id)
    others = np.delete(np.arange(len(ids)), k0)
    vmin[k0] = min(vmin[others].min(), 1.0)
    vmax[k0] = max(vmax[others].max(), 1.0)
    nodes = [{"id": ids[k], "v_min": float(vmin[k]), "v_max": float(vmax[k]),
              "p_demand": [float(bus["pd"][k])] * 2, "q_demand": [float(bus["qd"][k])] * 2}
             for k in range(len(ids))]
    pos = {nid: k for k, nid in enumerate(ids)}
    ends = orient_branches(len(ids), pos[root_id],
                           [(pos[a], pos[b]) for a, b in zip(br["from"], br["to"])])
    # downstream demand and DER capacity per branch for the default rating
    s_load = np.hypot(bus["pd"], bus["qd"])
    s_der = np.zeros(len(ids))
    for g in ders:
        s_der[pos[g["node"]]] += np.hypot(max(abs(v) for v in g["p"]), max(abs(v) for v in g["q"]))
    children = [[] for _ in ids]
    for k, (a, b) in enumerate(ends):
        children[a].append(b)

    def down(j, acc):
        tot = acc[j]
        for c in children[j]:
            tot += down(c, acc)
        return tot

    branches = []
    for k, (a, b) in enumerate(ends):
        rate = br["rate_a"][k] if case_ratings else 0.0
        if rate <= 0:
            rate = max(rating_margin * down(b, s_load) + down(b, s_der), rating_floor)
        branches.append({"id": k + 1, "from": ids[a], "to": ids[b], "r": float(br["r"][k]),
                         "x": float(br["x"][k]), "i_min": 0.0,
                         "i_max": float(rate / np.sqrt(vmin[b]))})
    gens = []
    for n, g in enumerate(ders):
        rec = {"id": g.get("id", f"der{n + 1}"), "node": g["node"], "p": list(g["p"]),
               "q": list(g["q"]), "cost": list(g.get("cost", [0.0, 0.0]))}
        for key in ("p_nominal", "q_nominal"):
            if key in g:
                rec[key] = g[key]
        gens.append(rec)
    d = {"format": FORMAT, "version": 1, "name": name or Path(path).stem,
         "base_mva": mp["base_mva"], "voltage_quantity": "magnitude", "root": root_id,
         "v_root": 1.0, "nodes": nodes, "branches": branches, "generators": gens}
    return network_from_dict(d)


# ---------------------------------------------------------------------------
# bundled networks

def _data_path(name):
    return resources.files("vppregion") / "data" / name


def two_bus(load_p=0.1, load_q=0.0, r=0.1, x=0.1, i_max=1.0, gen=None, v_limits=(0.81, 1.21)):
    """Root plus one load node. ``gen`` = ((p_lo, p_hi), (q_lo, q_hi)) adds a DER at node 1."""
    gens = []
    if gen is not None:
        gens.append({"id": "g1", "node": 1, "p": list(gen[0]), "q": list(gen[1]), "cost": [1.0, 0.0]})
    d = {"format": FORMAT, "name": "two-bus", "base_mva": 1.0, "voltage_quantity": "squared",
         "root": 0, "v_root": 1.0,
         "nodes": [{"id": 0, "v_min": v_limits[0], "v_max": v_limits[1]},
                   {"id": 1, "v_min": v_limits[0], "v_max": v_limits[1],
                    "p_demand": [load_p, load_p], "q_demand": [load_q, load_q]}],
         "branches": [{"id": 1, "from": 0, "to": 1, "r": r, "x": x, "i_max": i_max}],
         "generators": gens}
    return network_from_dict(d)


def six_bus():
    """Small synthetic feeder: 0-1-2-3 main line and a 1-4-5 lateral, two DERs."""
    vmin, vmax = 0.9 ** 2, 1.1 ** 2
    loads = {1: (0.04, 0.02), 2: (0.06, 0.03), 3: (0.05, 0.02), 4: (0.05, 0.025), 5: (0.04, 0.02)}
    nodes = [{"id": 0, "v_min": vmin, "v_max": vmax}]
    for k, (p, q) in loads.items():
        nodes.append({"id": k, "v_min": vmin, "v_max": vmax, "p_demand": [p, p],
                      "q_demand": [q, q]})
    lines = [(0, 1, 0.02, 0.04), (1, 2, 0.05, 0.06), (2, 3, 0.06, 0.05), (1, 4, 0.04, 0.05),
             (4, 5, 0.07, 0.06)]
    branches = [{"id": k + 1, "from": a, "to": b, "r": r, "x": x, "i_max": 0.6 ** 2}
                for k, (a, b, r, x) in enumerate(lines)]
    gens = [{"id": "pv3", "node": 3, "p": [0.0, 0.15], "q": [-0.06, 0.06], "cost": [10.0, 0.0]},
            {"id": "pv5", "node": 5, "p": [0.0, 0.12], "q": [-0.05, 0.05], "cost": [12.0, 0.0]}]
    return network_from_dict({"format": FORMAT, "name": "six-bus", "base_mva": 10.0,
                              "voltage_quantity": "squared", "root": 0, "v_root": 1.0,
                              "nodes": nodes, "branches": branches, "generators": gens})


# DER placements added to the feeder test cases (per unit on the case base)
IEEE33_DERS = [
    {"id": "der18", "node": 18, "p": [0.0, 0.08], "q": [-0.04, 0.04], "cost": [20.0, 0.0]},
    {"id": "der22", "node": 22, "p": [0.0, 0.06], "q": [-0.03, 0.03], "cost": [18.0, 0.0]},
    {"id": "der25", "node": 25, "p": [0.0, 0.08], "q": [-0.04, 0.04], "cost": [22.0, 0.0]},
    {"id": "der33", "node": 33, "p": [0.0, 0.08], "q": [-0.04, 0.04], "cost": [25.0, 0.0]},
]

IEEE136_DERS = [
    {"id": f"der{n}", "node": n, "p": [0.0, 0.05], "q": [-0.025, 0.025],
     "cost": [20.0 + k, 0.0]}
    for k, n in enumerate((10, 30, 56, 74, 96, 120))
]


def ieee33(ders=None):
    return network_from_matpower(_data_path("case33bw.m"), IEEE33_DERS if ders is None else ders,
                                 name="ieee33")


def ieee136(ders=None):
    # the base case sags to 0.933 p.u., below the file's 0.95 limit, and its 100 MVA
    # ratings are placeholders; use 0.9-1.1 p.u. and the default rating rule instead
    return network_from_matpower(_data_path("case136ma.m"), IEEE136_DERS if ders is None else ders,
                                 v_limits=(0.9, 1.1), name="ieee136", case_ratings=False)


BUILTIN = {"two-bus": two_bus, "six-bus": six_bus, "ieee33": ieee33, "ieee136": ieee136}


def get_network(name) -> Network:
    """Load a network by built-in name or JSON path."""
    if name in BUILTIN:
        return BUILTIN[name]()
    return load_network(name)


def nominal_point(net: Network):
    """Power-flow solution at the nominal set-points."""
    res = newton_solve(net, net.u_nominal, init=flat_start(net))
    if not res.converged:
        raise NetworkError("nominal power flow did not converge")
    return res.point
