"""Regenerate the CLI fixtures: a synthetic admission series and its golden fit.

Run from the repository root: ``python tests/fixtures/make_fixtures.py``.
The golden file is whatever the ``fit`` command produces on these inputs, so
rerun this only when the fitting code changes on purpose.
"""
from pathlib import Path
import shutil
import tempfile

from branchepi import io
from branchepi.cli import main
from branchepi.core import baseline_params
from branchepi.fitting import FitParams, simulate_fit_params

HERE = Path(__file__).parent
TRUTH = FitParams(30, 0.4, 20, 0.2, 30, 0.05)
FIT_ARGS = ["--reps", "40", "--seed", "11", "--refine-rounds", "1",
            "--train-end", "2020-03-18", "--test-end", "2020-03-28"]


def main_fixtures():
    counts = simulate_fit_params(TRUTH, baseline_params(), 49, 1, seed=2020)[0]
    io.save_observations(io.observations_from_counts(counts, "2020-02-08"), HERE / "synthetic_obs.csv")
    with tempfile.TemporaryDirectory() as tmp:
        status = main(["fit", "--data", str(HERE / "synthetic_obs.csv"),
                       "--grid", str(HERE / "fit_grid.yaml"), "--out", tmp, *FIT_ARGS])
        assert status == 0
        shutil.copy(Path(tmp) / "fit.json", HERE / "fit_golden.json")


if __name__ == "__main__":
    main_fixtures()
