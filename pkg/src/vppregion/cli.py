"""Command-line front end.

Exit codes: 0 success, 1 domain failure (no anchor, failed verification,
infeasible coordination), 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .coordination import (GuardExceededError, InconsistentRegionError, TransmissionError,
                           build_cost_surface, load_transmission, problem_from_atlases,
                           solve_etp, solve_tp_enumerate)
from .explorer import (AnchorError, ExploreConfig, OutsideRegionError, export_vertices_csv,
                       explore, load_atlas, save_atlas, verify_point)
from .geometry import sample_polygon
from .netmodel import NetworkError
from .networks import get_network
from .oracle import BudgetExceededError, brute_force_region, coverage, default_ranges, export_grid_csv

log = logging.getLogger("vppregion")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
GAP_TOL = 1e-6


class UsageError(Exception):
    pass


def _network(name):
    if name is None:
        raise UsageError("--network is required")
    try:
        return get_network(name)
    except FileNotFoundError:
        raise UsageError(f"network file not found: {name}")
    except NetworkError as exc:
        raise UsageError(f"invalid network: {exc}")


def _atlas(path):
    try:
        return load_atlas(path)
    except FileNotFoundError:
        raise UsageError(f"atlas file not found: {path}")
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid atlas {path}: {exc}")


def _positive(name, v):
    if v is not None and v <= 0:
        raise UsageError(f"{name} must be positive")


def cmd_characterize(args):
    net = _network(args.network)
    _positive("--iterations", args.iterations)
    _positive("--max-subregions", args.max_subregions)
    _positive("--max-points", args.max_points)
    cfg = ExploreConfig(strategy=args.strategy, max_iterations=args.iterations,
                        max_subregions=args.max_subregions, max_points=args.max_points,
                        seed=args.seed)
    try:
        atlas = explore(net, cfg, progress=print)
    except AnchorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    try:
        for k, sr in enumerate(atlas.subregions):
            atlas.cost_surfaces[k] = build_cost_surface(sr, net).to_dict()
    except ValueError as exc:
        log.warning("cost surfaces skipped: %s", exc)
        atlas.cost_surfaces = {}
    except InconsistentRegionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_atlas(atlas, out)
    export_vertices_csv(atlas, out.with_suffix(".vertices.csv"))
    area = sum(s.polygon.area for s in atlas.subregions)
    print(f"{len(atlas.subregions)} sub-regions, termination: {atlas.termination}, "
          f"total area {area:.6g}")
    print(f"atlas written to {out}")
    return EXIT_OK


def cmd_verify(args):
    net = _network(args.network)
    atlas = _atlas(args.atlas)
    if args.samples < 0:
        raise UsageError("--samples must be non-negative")
    if args.samples == 0:
        print("warning: 0 samples requested, nothing verified (vacuous pass)")
        return EXIT_OK
    rng = np.random.default_rng(args.seed)
    report = []
    all_ok = True
    for k, sr in enumerate(atlas.subregions):
        pts = sample_polygon(sr.polygon, args.samples, rng)
        fails, tested = [], 0
        for p in pts:
            if not sr.polygon.contains(p):
                continue
            tested += 1
            try:
                r = verify_point(net, sr, p)
            except OutsideRegionError:
                continue
            if not r.passed:
                fails.append({"pcc": p.tolist(), "reason": r.reason})
        ok = not fails and tested > 0
        all_ok &= ok
        print(f"sub-region {k}: {tested - len(fails)}/{tested} passed {'PASS' if ok else 'FAIL'}")
        for f in fails[:10]:
            print(f"  violating sample {f['pcc']}: {f['reason']}")
        report.append({"subregion": k, "tested": tested, "failed": fails})
    print("overall:", "PASS" if all_ok else "FAIL")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"pass": all_ok, "seed": args.seed, "subregions": report}, fh, indent=1)
    return EXIT_OK if all_ok else EXIT_DOMAIN


def cmd_coordinate(args):
    try:
        tr = load_transmission(args.transmission)
    except FileNotFoundError:
        raise UsageError(f"transmission file not found: {args.transmission}")
    except TransmissionError as exc:
        raise UsageError(f"invalid transmission file: {exc}")
    atlases = [_atlas(p) for p in args.atlas]
    for a, p in zip(atlases, args.atlas):
        if not a.cost_surfaces:
            log.warning("atlas %s has no cost surfaces; zero cost assumed", p)
    try:
        cp = problem_from_atlases(tr, atlases, args.big_m)
    except ValueError as exc:
        raise UsageError(str(exc))
    results = {}
    try:
        if args.mode in ("etp", "both"):
            results["etp"] = solve_etp(cp)
        if args.mode in ("tp-oracle", "both"):
            results["tp-oracle"] = solve_tp_enumerate(cp)
    except GuardExceededError as exc:
        raise UsageError(str(exc))
    out = {"base_mva": tr.base_mva}
    code = EXIT_OK
    for name, d in results.items():
        out[name] = d.to_dict(tr)
        if not d.optimal:
            code = EXIT_DOMAIN
            print(f"{name}: {d.status}")
            for line in d.report:
                print("  " + line)
        else:
            print(f"{name}: value {d.value:.9g} (units {d.unit_cost:.9g}, VPPs {d.vpp_cost:.9g}), "
                  f"regions {d.selected}")
    if len(results) == 2 and all(d.optimal for d in results.values()):
        gap = abs(results["etp"].value - results["tp-oracle"].value)
        out["gap"] = gap
        print(f"gap: {gap:.3g}")
        if gap > GAP_TOL * max(1.0, abs(results["tp-oracle"].value)):
            code = EXIT_DOMAIN
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=1)
    return code


def cmd_oracle(args):
    net = _network(args.network)
    if args.resolution < 2:
        raise UsageError("--resolution must be at least 2")
    pr, qr = default_ranges(net)
    if args.p_range:
        pr = tuple(args.p_range)
    if args.q_range:
        qr = tuple(args.q_range)
    try:
        grid = brute_force_region(net, pr, qr, args.resolution, budget=args.budget)
    except BudgetExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    export_grid_csv(grid, args.out)
    print(f"{grid.count} of {args.resolution ** 2} cells verified feasible; grid written to {args.out}")
    if args.atlas:
        atlas = _atlas(args.atlas)
        print(f"coverage: {coverage(grid, atlas.polygons):.4f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="vppregion",
                                description="AC-feasible power transfer regions of radial networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("characterize", help="build an atlas of certified sub-regions")
    c.add_argument("--network", required=True, help="network JSON file or built-in name")
    c.add_argument("--out", required=True)
    c.add_argument("--iterations", type=int, default=3)
    c.add_argument("--max-subregions", type=int, default=50)
    c.add_argument("--max-points", type=int, default=400)
    c.add_argument("--strategy", choices=("extremes", "nominal"), default="extremes")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_characterize)

    v = sub.add_parser("verify", help="AC-verify random points of every sub-region")
    v.add_argument("--network", required=True)
    v.add_argument("--atlas", required=True)
    v.add_argument("--samples", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    k = sub.add_parser("coordinate", help="transmission dispatch with VPP atlases")
    k.add_argument("--transmission", required=True)
    k.add_argument("--atlas", required=True, nargs="+", help="one atlas per VPP, in file order")
    k.add_argument("--mode", choices=("etp", "tp-oracle", "both"), default="etp")
    k.add_argument("--big-m", type=float, default=None, help="override the per-row big-M values")
    k.add_argument("--out")
    k.set_defaults(func=cmd_coordinate)

    o = sub.add_parser("oracle", help="witness-verified brute-force grid")
    o.add_argument("--network", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--resolution", type=int, default=51)
    o.add_argument("--p-range", type=float, nargs=2)
    o.add_argument("--q-range", type=float, nargs=2)
    o.add_argument("--budget", type=float, default=2e6)
    o.add_argument("--atlas")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
