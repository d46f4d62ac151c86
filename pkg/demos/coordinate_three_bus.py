"""Dispatch a three-bus DC transmission network with the 33-bus feeder as a VPP.

    python demos/coordinate_three_bus.py [atlas.json]

Uses the atlas from characterize_ieee33.py when given, otherwise builds one.
Solves the big-M formulation and the enumeration oracle and prints both.
"""
import sys
from pathlib import Path

from vppregion.coordination import (build_cost_surface, load_transmission, problem_from_atlases,
                                    solve_etp, solve_tp_enumerate)
from vppregion.explorer import ExploreConfig, explore, load_atlas
from vppregion.networks import ieee33

here = Path(__file__).parent
tr = load_transmission(here / "data" / "three_bus.json")

if len(sys.argv) > 1:
    atlas = load_atlas(sys.argv[1])
else:
    net = ieee33()
    atlas = explore(net, ExploreConfig(strategy="nominal", max_iterations=2))
    for k, sr in enumerate(atlas.subregions):
        atlas.cost_surfaces[k] = build_cost_surface(sr, net).to_dict()

cp = problem_from_atlases(tr, [atlas])
print(f"{len(atlas.subregions)} sub-regions offered, {cp.n_assignments} assignments")

etp = solve_etp(cp, validate=True)
tp = solve_tp_enumerate(cp)
for name, d in (("big-M MILP", etp), ("enumeration", tp)):
    p, q = d.pcc[0]
    print(f"{name}: cost {d.value:.6f} (units {d.unit_cost:.6f}, VPP {d.vpp_cost:.6f}), "
          f"region {d.selected[0]}, PCC ({p:+.4f}, {q:+.4f}) p.u. of {tr.vpp_scale[0] * tr.base_mva:g} MVA")
    print("  units:", ", ".join(f"{i}={v:.4f}" for i, v in zip(tr.unit_ids, d.units)))
    print("  line flows:", ", ".join(f"{i}={v:+.4f}" for i, v in zip(tr.line_ids, d.flows)))
print(f"gap {abs(etp.value - tp.value):.2e}; validation issues: {etp.report or 'none'}")
