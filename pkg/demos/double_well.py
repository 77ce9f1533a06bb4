"""Particle samplers on the 1D double well, scored by energy distance.

Run: python demos/double_well.py [seed]
"""

import sys
import warnings

from infonewton.core import init_ensemble
from infonewton.harness.metrics import EnergyDistance, grid_reference_samples
from infonewton.harness.targets import double_well
from infonewton.samplers import SamplerConfig, run

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
model = double_well()
ed = EnergyDistance(grid_reference_samples(model, 10_000, 0, [(-4, 4)]))
ens = init_ensemble(100, 0.0, 0.01, seed)

configs = {
    "wgf": SamplerConfig("wgf", 0.01, max_iter=20),
    "svgd": SamplerConfig("svgd", 0.1, max_iter=20),
    "wnewton-a": SamplerConfig("wnewton-a", 1.0, max_iter=20),
    "wnewton-k": SamplerConfig("wnewton-k", 1.0, max_iter=20),
}
warnings.simplefilter("ignore")
for name, cfg in configs.items():
    tr = run(cfg, model, ens, metrics=lambda e: {"energy_distance": ed(e.positions)})
    it, val = tr.metric("energy_distance")
    print(f"{name:>10}: " + "  ".join(f"k={k}:{v:.4f}" for k, v in zip(it, val) if k in (0, 2, 5, 10, 20)))
