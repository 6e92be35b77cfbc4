"""
Mean-field and stochastic outbreaks
===================================

Two hundred people are exposed on day 0. The expected number of daily
hospital admissions follows a linear recursion, while single realizations
scatter around it. Once the outbreak is large, every realization grows at
the same daily factor: the Perron root of the transition matrix.

Run with ``python demos/outbreak.py [output_dir]``.
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from branchepi import (baseline_params, build_transition_matrix, estimate_growth_rate, new_state,
                       simulate_batch, simulate_meanfield, spectral_radius)

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "output")
out.mkdir(parents=True, exist_ok=True)

# %%
# Baseline disease: E lasts 3-5 days, P 1-2, I1 5-7, I2 4 and A 11 days.
# Symptomatic people make 0.4 new exposures a day, the others 0.3.
params = baseline_params()
M = build_transition_matrix(params)
rho, perron = spectral_radius(M)
print(f"daily growth factor rho = {rho:.4f}  (doubling every {np.log(2) / np.log(rho):.1f} days)")

# %%
# Expected admissions against 100 realizations.
T = 60
x0 = new_state(params.h, {("E", 1): 200}, dtype=np.int64)
mean = simulate_meanfield(M, x0.astype(float), T)[:, -1]
runs = simulate_batch(x0, params, T, 100, seed=2020, keep="H").x_H
lo, hi = np.percentile(runs, [5, 95], axis=0)

fig, ax = plt.subplots(figsize=(7, 4))
ax.fill_between(range(T + 1), lo, hi, color="C0", alpha=0.25, label="5-95% of 100 runs")
ax.plot(runs[:5].T, color="C0", lw=0.6, alpha=0.7)
ax.plot(mean, color="k", lw=2, label="mean-field")
ax.set_yscale("symlog", linthresh=10)
ax.set_xlabel("day")
ax.set_ylabel("new hospital admissions")
ax.legend()
fig.tight_layout()
fig.savefig(out / "outbreak.png", dpi=120)

# %%
# The late daily ratio of any surviving run settles on rho.
late = runs[:, 40:].astype(float)
survivors = late.min(axis=1) > 0
ratios = np.median(late[survivors, 1:] / late[survivors, :-1], axis=1)
print(f"median late ratio over {survivors.sum()} runs: {np.median(ratios):.4f}")
print(f"log-linear fit to the mean-field tail:   {estimate_growth_rate(mean[40:]):.4f}")

# %%
# The stationary mix of compartments is the Perron vector.
share = {ph: perron[sl].sum() / perron.sum() for ph, sl in
         [("E", slice(0, 25)), ("P", slice(25, 50)), ("I1", slice(50, 75)),
          ("A", slice(75, 100)), ("I2", slice(100, 125))]}
print("long-run compartment shares:", {k: round(float(v), 3) for k, v in share.items()})
