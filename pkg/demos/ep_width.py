"""The per-branch width problem on a few hand-sized cases.

    python demos/ep_width.py

Shows how the bilinear coupling weight trades the voltage range against the
current range, and compares the solver with the brute-force grid.
"""
import numpy as np

from vppregion.epsolver import BranchEpProblem, ep_grid_oracle, solve_branch_ep

for c in (0.0, 1.0, 10.0, 50.0):
    prob = BranchEpProblem(-0.1, 0.1, [-0.1], [0.1], [c], [1.0])
    sol = solve_branch_ep(prob)
    grid, _, step = ep_grid_oracle(prob, 41)
    vlo, vhi, ilo, ihi = prob.unpack(sol.x)
    print(f"c = {c:5.1f}: objective {sol.objective:+.4f} (grid {grid:+.4f}, step {step:.3f}); "
          f"V range [{vlo:+.4f}, {vhi:+.4f}], I range [{ilo[0]:+.4f}, {ihi[0]:+.4f}]")

# a grouped problem: one shared voltage range, three branch currents
rng = np.random.default_rng(1)
prob = BranchEpProblem(-0.05, 0.08, -rng.uniform(0, 0.1, 3), rng.uniform(0, 0.1, 3),
                       rng.uniform(0, 30, 3), rng.uniform(0.5, 2, 3))
sol = solve_branch_ep(prob)
print(f"grouped: objective {sol.objective:+.5f}, x = {np.round(sol.x, 5)}")
