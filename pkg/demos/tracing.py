"""
How much contact tracing stops an outbreak?
===========================================

Each infected person carries the path of phases they will go through and a
countdown to their positive test. A test isolates the person; with
probability ``p_t`` it also reveals the people they infected, who are then
tested the next day. Random screening catches anyone with probability
``epsilon`` per day. The growth factor of the resulting multi-type process
says whether tracing is enough.

Run with ``python demos/tracing.py [output_dir]``.
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from branchepi import (TracingConfig, baseline_params, build_transition_matrix,
                       critical_tracing_probability, spectral_radius, tracing_progeny_matrix,
                       tracing_sweep)

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "output")
out.mkdir(parents=True, exist_ok=True)

params = baseline_params()
print(f"no intervention: rho = {spectral_radius(build_transition_matrix(params))[0]:.4f}")

# %%
# With neither tracing nor screening the extended model is the base model
# written in a different basis, so its growth factor is the same.
tm = tracing_progeny_matrix(TracingConfig(0.0, 0.0), params)
print(f"extended model, p_t = eps = 0: rho = {tm.spectral_radius():.4f} over {tm.matrix.shape[0]} types")

# %%
# Growth factor over a grid of tracing and screening probabilities.
p_ts = np.linspace(0, 1, 11)
eps = [0.0, 0.05, 0.1, 0.2]
rows = tracing_sweep(params, p_ts, eps)
rho = np.array([r.rho for r in rows]).reshape(len(eps), len(p_ts))

fig, ax = plt.subplots(figsize=(6, 4))
for e, line in zip(eps, rho):
    ax.plot(p_ts, line, marker="o", ms=3, label=f"screening {e:g}/day")
ax.axhline(1, color="k", lw=0.8, ls="--")
ax.set_xlabel("tracing probability p_t")
ax.set_ylabel("daily growth factor")
ax.legend()
fig.tight_layout()
fig.savefig(out / "tracing.png", dpi=120)

# %%
# The smallest tracing probability that makes the outbreak die out.
for e in (0.0, 0.05, 0.1):
    crit = critical_tracing_probability(params, e)
    if crit.p_t is None:
        print(f"eps = {e:g}: {crit.reason}")
    else:
        print(f"eps = {e:g}: tracing must reach p_t = {crit.p_t:.3f}")

# %%
# Below threshold, the expected number of person-days of infection caused
# by one newly exposed person is finite.
for r in rows:
    if r.epsilon == 0.1 and r.p_t in (0.8, 0.9, 1.0):
        print(f"p_t = {r.p_t:.1f}, eps = 0.1: expected person-days {r.expected_total:.1f}")
