"""Gaussian Newton flow in one dimension next to its closed forms.

Run: python demos/gaussian_flow.py
"""

import numpy as np

from infonewton.gaussian import closed_form_1d, fit_exponential_rate
from infonewton.harness.experiment import gaussian_oracle

rows = gaussian_oracle(0.25, 1.0, 3.0, mu0=2.0, n_out=7)
print(f"{'t':>5} {'sim mean':>10} {'sim var':>10} {'closed var':>11}")
for r in rows:
    print(f"{r['t']:5.2f} {r['sim_mean']:10.6f} {r['sim_var']:10.6f} {r['nld_var']:11.6f}")

# mean decay rates with a wide target: Newton-type dynamics are insensitive to its variance
t = np.linspace(0.0, 5.0, 51)
for method in ("nld", "hamcmc", "old_lld"):
    mu, _ = closed_form_1d(method, 2.0, 0.25, 0.0, 10.0, t)
    print(f"{method:>8}: mean decay rate {fit_exponential_rate(t, mu):.3f}")
