"""
The command-line pipeline on a synthetic admissions file
========================================================

Writes a dated admissions CSV, then fits, predicts and filters it through
the ``branchepi`` command. Each command leaves its outputs and a
``manifest.json`` (command, config hash, seed, start time, output list) in
its own directory; rerunning with the same seed reproduces every numeric
file byte for byte.

Run with ``python demos/cli_pipeline.py [output_dir]``. The same steps from
a shell::

    branchepi fit --data obs.csv --grid grid.yaml --seed 11 --reps 40 \\
        --train-end 2020-04-08 --test-end 2020-04-18 --out fit
    branchepi filter --data obs.csv --out filter
"""
import json
import sys
from pathlib import Path

import numpy as np

from branchepi import FitParams, baseline_params
from branchepi.cli import main
from branchepi.fitting import simulate_fit_params
from branchepi.io import observations_from_counts, save_observations

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "output") / "pipeline"
out.mkdir(parents=True, exist_ok=True)

# %%
# Seventy-one days of admissions from a known configuration, one of them lost.
truth = FitParams(50, 0.4, 30, 0.2, 40, 0.05)
counts = simulate_fit_params(truth, baseline_params(), 70, 1, seed=99)[0].astype(float)
counts[55] = np.nan
save_observations(observations_from_counts(counts, "2020-02-08"), out / "obs.csv")
(out / "grid.yaml").write_text(
    "x_e0: [30, 50, 70]\n"
    "alpha1: {start: 0.35, stop: 0.45, step: 0.05}\n"
    "t2: [27, 30, 33]\n"
    "alpha2: [0.15, 0.2, 0.25]\n"
    "t3: [37, 40, 43]\n"
    "alpha3: [0.03, 0.06]\n")

# %%
# Fit on data up to April 8 (day 60) and score the next ten days.
status = main(["fit", "--data", str(out / "obs.csv"), "--grid", str(out / "grid.yaml"),
               "--seed", "11", "--reps", "40", "--refine-rounds", "1",
               "--train-end", "2020-04-08", "--test-end", "2020-04-18", "--out", str(out / "fit")])
fit = json.loads((out / "fit" / "fit.json").read_text())
print("fit exit status", status)
print("fitted", fit["params_hat"])
print("train loss", fit["train_loss"], " prediction error", fit["pred_loss"])

# %%
# Filter the hidden compartments. The missing day is a prediction-only step.
status = main(["filter", "--data", str(out / "obs.csv"), "--out", str(out / "filter")])
print("filter exit status", status, json.loads((out / "filter" / "filter_summary.json").read_text()))

# %%
# Errors come back as JSON with a nonzero exit status.
status = main(["simulate-stochastic", "--out", str(out / "no_seed")])
print("missing seed exit status", status)
