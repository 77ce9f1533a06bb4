"""Wasserstein- and Fisher-Rao-Newton density flows on a 1D grid.

Run: python demos/grid_flows.py
"""

from infonewton.harness.experiment import grid_experiment

for target in ("gauss1d", "double-well"):
    res = grid_experiment(target, 401, steps=50, dt=0.1)
    for metric in ("w", "fr"):
        kl = [r["kl"] for r in res["kl"] if r["metric"] == metric]
        print(f"{target:>12} {metric:>2}: KL {kl[0]:.4f} -> {kl[-1]:.4g} in {len(kl) - 1} steps")
