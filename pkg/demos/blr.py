"""Bayesian logistic regression on synthetic data: OLD against the kernel Newton sampler.

Run: python demos/blr.py
"""

import warnings

import numpy as np

from infonewton.core import init_ensemble
from infonewton.harness.blr import build_blr_posterior, predictive_metrics, synthetic_dataset
from infonewton.samplers import SamplerConfig, run

data = synthetic_dataset(5, 500, 500, seed=0)
model = build_blr_posterior(data, prior_scale=1.0, batch_size=100, seed=0)
ens = init_ensemble(50, np.zeros(5), np.eye(5), seed=0)
warnings.simplefilter("ignore")
for name, cfg in {
    "old": SamplerConfig("old", 5e-4, decay=0.9, decay_every=100, max_iter=300),
    "wnewton-k": SamplerConfig("wnewton-k", 0.1, decay=0.9, decay_every=100, gamma=0.005, eps=1.0, max_iter=300),
}.items():
    tr = run(cfg, model, ens, metric_every=100,
             metrics=lambda e: predictive_metrics(e.positions, data.x_test, data.y_test))
    it, acc = tr.metric("test_accuracy")
    print(f"{name:>10}: test accuracy " + "  ".join(f"k={k}:{a:.3f}" for k, a in zip(it, acc)))
print("generating weights:", np.round(data.true_weights, 3))
