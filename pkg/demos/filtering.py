"""
Seeing the hidden compartments through hospital admissions
==========================================================

Only daily admissions are observed. The Kalman filter propagates the
mean-field prediction together with the branching-process covariance and
corrects both with each day's count, which recovers the unobserved
exposed and asymptomatic populations far better than the open-loop
forecast.

Run with ``python demos/filtering.py [output_dir]``.
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from branchepi import (baseline_params, build_transition_matrix, filter_series, new_state,
                       simulate_meanfield, simulate_stochastic)
from branchepi.kalman import hidden_totals

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "output")
out.mkdir(parents=True, exist_ok=True)

params = baseline_params()
h = params.h
T = 90

# %%
# A small start: ten exposed people. Early chance events decide how big the
# outbreak gets, so the deterministic forecast is off by a random factor.
x0 = new_state(h, {("E", 1): 10}, dtype=np.int64)
seed = 0
while True:
    truth = simulate_stochastic(x0, params, T, seed=seed).states
    if truth[-1, :-1].sum() > 0:
        break
    seed += 1
admissions = truth[1:, -1].astype(float)

states = filter_series(admissions, params, x0.astype(float))
est = hidden_totals(np.array([s.x_hat for s in states]), h)
real = hidden_totals(truth, h)
forecast = hidden_totals(simulate_meanfield(build_transition_matrix(params), x0.astype(float), T), h)

for phase in ("E", "A"):
    rmse_f = np.sqrt(np.mean((est[phase] - real[phase]) ** 2))
    rmse_o = np.sqrt(np.mean((forecast[phase] - real[phase]) ** 2))
    print(f"{phase}: filter RMSE {rmse_f:9.1f}   open-loop RMSE {rmse_o:9.1f}")

# %%
# Standardized innovations are centered. Their spread sits below one here
# because these admissions are exact, while the default measurement noise
# assumes Poisson reporting error on top.
z = np.array([s.standardized_innovation()[0] for s in states[1:] if s.innovation is not None])
z = z[np.isfinite(z)]
print(f"innovations: mean {z.mean():+.2f}, std {z.std():.2f}")

fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
for ax, phase in zip(axes, ("E", "A")):
    ax.plot(real[phase], color="k", lw=2, label="true")
    ax.plot(est[phase], color="C1", label="filtered")
    ax.plot(forecast[phase], color="C0", ls="--", label="open loop")
    ax.set_title(f"hidden {phase} total")
    ax.set_xlabel("day")
axes[0].legend()
fig.tight_layout()
fig.savefig(out / "filtering.png", dpi=120)
