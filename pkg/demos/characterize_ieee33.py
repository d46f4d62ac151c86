"""Characterize the IEEE 33-bus feeder, check the atlas and compare it with the brute-force grid.

    python demos/characterize_ieee33.py [out_dir]

Writes the atlas, its vertex CSV and the oracle grid CSV to ``out_dir``
(default demos/out) for plotting with any external tool.
"""
import sys
import time
from pathlib import Path

import numpy as np

from vppregion.coordination import build_cost_surface
from vppregion.explorer import (ExploreConfig, explore, export_vertices_csv, sample_soundness,
                                save_atlas)
from vppregion.networks import ieee33
from vppregion.oracle import brute_force_region, coverage, default_ranges, export_grid_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "out")
out.mkdir(parents=True, exist_ok=True)
net = ieee33()

t0 = time.time()
atlas = explore(net, ExploreConfig(strategy="nominal", max_iterations=2), progress=print)
print(f"{len(atlas.subregions)} sub-regions in {time.time() - t0:.1f} s ({atlas.termination})")
for k, sr in enumerate(atlas.subregions):
    p, q = sr.anchor.pcc
    print(f"  region {k}: anchor ({p:+.4f}, {q:+.4f}) p.u., {len(sr.polygon.vertices)} vertices, "
          f"area {sr.polygon.area:.3e}")

# generation cost as a function of the PCC point, for the coordination demo
for k, sr in enumerate(atlas.subregions):
    atlas.cost_surfaces[k] = build_cost_surface(sr, net).to_dict()
save_atlas(atlas, out / "ieee33_atlas.json")
export_vertices_csv(atlas, out / "ieee33_vertices.csv")

# every sampled PCC point must admit an AC power flow within limits
rng = np.random.default_rng(0)
for k, sr in enumerate(atlas.subregions):
    ok, total, fails = sample_soundness(net, sr, 50, rng)
    print(f"  region {k}: {ok}/{total} samples verified by a full AC solve")

t0 = time.time()
p, q = default_ranges(net)
grid = brute_force_region(net, p, q, resolution=51)
export_grid_csv(grid, out / "ieee33_grid.csv")
print(f"oracle: {grid.count} of {grid.feasible.size} cells verified in {time.time() - t0:.1f} s")
print(f"coverage of verified cells by the atlas: {coverage(grid, atlas.polygons):.2%}")
