"""
Fitting a three-phase contact rate to admissions
================================================

Contact rates drop twice, at two unknown dates. Six numbers describe the
epidemic: the initial number of exposed people, three rates and two
breakpoints. A Monte Carlo grid search scores each candidate by the average
L1 distance between log admissions of simulated runs and the data, then
predicts the following ten days.

Run with ``python demos/fitting.py [output_dir]``. Takes about 30 seconds.
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from branchepi import FitGrid, FitParams, baseline_params, grid_search_fit, prediction_error
from branchepi.fitting import simulate_fit_params

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "output")
out.mkdir(parents=True, exist_ok=True)

params = baseline_params()
truth = FitParams(x_e0=50, alpha1=0.4, t2=30, alpha2=0.2, t3=40, alpha3=0.05)
T, T_pred = 70, 80

# %%
# Synthetic data: one realization, held out after day T.
series = simulate_fit_params(truth, params, T_pred, 1, seed=99)[0].astype(float)
train, test = series[:T + 1], series[T + 1:]

# %%
# A coarse grid, then one refinement halving the steps around the best point.
grid = FitGrid(x_e0=(25, 50, 75), alpha1=(0.35, 0.40, 0.45), t2=(27, 30, 33),
               alpha2=(0.15, 0.20, 0.25), t3=(37, 40, 43), alpha3=(0.03, 0.06))
fit = grid_search_fit(train, grid, n_reps=60, loss_kind="l1log", seed=7, refine_rounds=1)
print("true  ", truth.as_tuple())
print("fitted", fit.params_hat.as_tuple())
print(f"training loss {fit.train_loss.mean:.3f} +- {fit.train_loss.half_width:.3f} "
      f"({len(fit.table)} points scored)")

err = prediction_error(fit, test)
print(f"prediction error on days {T + 1}-{T_pred}: {err.mean:.1f} +- {err.half_width:.1f} admissions/day")

# %%
# Fitted runs against the data.
runs = simulate_fit_params(fit.params_hat, params, T_pred, 200, seed=1)
lo, mid, hi = np.percentile(runs, [5, 50, 95], axis=0)
fig, ax = plt.subplots(figsize=(7, 4))
ax.fill_between(range(T_pred + 1), lo, hi, alpha=0.3, label="5-95% fitted runs")
ax.plot(mid, label="median fitted run")
ax.plot(series, "k.", ms=4, label="data")
ax.axvline(T + 0.5, color="grey", ls=":")
for t in (fit.params_hat.t2, fit.params_hat.t3):
    ax.axvline(t, color="C3", lw=0.8)
ax.set_xlabel("day")
ax.set_ylabel("new hospital admissions")
ax.legend()
fig.tight_layout()
fig.savefig(out / "fitting.png", dpi=120)
