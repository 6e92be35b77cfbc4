"""``branchepi`` command line: one subcommand per engine, CSV/JSON in and out.

Every run writes its files plus ``manifest.json`` into ``--out``. Failures
print a JSON error object on stderr and exit with a nonzero status.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .branching import simulate_batch
from .core import (DiseaseParams, RateSchedule, baseline_params, index_to_state, new_state,
                   phase_of_day)
from .fitting import FitGrid, FitResult, grid_search_fit, prediction_error, simulate_fit_params
from .kalman import filter_series
from .meanfield import (build_transition_matrix, perron_oracle, simulate_meanfield,
                        simulate_meanfield_schedule, spectral_radius)
from .mobility import MobilityRateSpec, contact_rate_series, normalize_flow
from .routing import CohortSystem, infection_rate_matrix, maxent_routing, simulate_cohorts
from .tracing import tracing_sweep

COMMANDS = ("simulate", "simulate-stochastic", "fit", "predict", "filter", "spectral",
            "tracing-sweep", "routing", "routing-estimate")
STOCHASTIC = ("simulate-stochastic", "fit", "predict")
DISEASE_KEYS = ("durations", "p_i", "p_h", "p_d", "alpha_i", "alpha_a", "h")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    out: Path
    config: Path | None = None
    data: Path | None = None
    mobility: Path | None = None
    flows: Path | None = None
    grid: Path | None = None
    fit: Path | None = None
    seed: int | None = None
    reps: int | None = None
    loss: str = "l1log"
    train_end: str | None = None
    test_end: str | None = None
    days: int = 60
    initial_exposed: float = 200
    options: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.command in STOCHASTIC and self.seed is None:
            raise UsageError(f"{self.command} draws random numbers: --seed is required")
        for name in ("config", "data", "mobility", "flows", "grid", "fit"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise UsageError(f"--{name.replace('_', '-')} file {p} does not exist")

    def describe(self) -> dict:
        """Everything that determines the numeric output, file contents included."""
        out = {"command": self.command, "seed": self.seed, "reps": self.reps, "loss": self.loss,
               "train_end": self.train_end, "test_end": self.test_end, "days": self.days,
               "initial_exposed": self.initial_exposed, "options": self.options}
        for name in ("config", "data", "mobility", "flows", "grid", "fit"):
            p = getattr(self, name)
            out[name] = None if p is None else Path(p).read_text()
        return out


# ---------------------------------------------------------------------------
# helpers


def _model_config(cfg: RunConfig) -> tuple[DiseaseParams, dict]:
    if cfg.config is None:
        return baseline_params(), {}
    data = io.load_structured(cfg.config)
    extra = {k: v for k, v in data.items() if k not in DISEASE_KEYS}
    if "durations" not in data:
        base = baseline_params().to_dict()
        base.update({k: v for k, v in data.items() if k in DISEASE_KEYS})
        data = base
    try:
        params = DiseaseParams.from_dict({k: v for k, v in data.items() if k in DISEASE_KEYS})
    except (KeyError, TypeError, ValueError) as err:
        raise io.DataError(f"{cfg.config}: invalid disease parameters ({err})") from None
    return params, extra


def _initial_state(params: DiseaseParams, extra: dict, cfg: RunConfig) -> np.ndarray:
    """``initial`` section ``{"E:1": 200, "H": 0}`` or ``--initial-exposed`` at (E,1)."""
    spec = extra.get("initial")
    if spec is None:
        return new_state(params.h, {("E", 1): cfg.initial_exposed})
    entries = {}
    for key, v in spec.items():
        phase, _, day = str(key).partition(":")
        entries[(phase, int(day) if day else (None if phase == "H" else 1))] = float(v)
    return new_state(params.h, entries)


def _schedule(params: DiseaseParams, extra: dict, cfg: RunConfig, T: int) -> RateSchedule | None:
    """Contact-rate schedule from the ``schedule`` section and optional mobility file."""
    sched = extra.get("schedule")
    if cfg.mobility is not None:
        if sched is None:
            raise UsageError("--mobility needs a 'schedule' section with phase base rates")
        _, raw = io.load_mobility(cfg.mobility)
        mob = extra.get("mobility", {})
        train = mob.get("normalize_days")
        flow = normalize_flow(raw, window=train, smooth_window=mob.get("smooth_window"))
        spec = MobilityRateSpec(sched["rates_i"], sched.get("rates_a", sched["rates_i"]),
                                mob.get("gamma_i", 0.0), mob.get("gamma_a", 0.0),
                                mob.get("form", "linear"))
        return contact_rate_series(spec, phase_of_day(sched.get("breakpoints", []), T), flow)
    if sched is None:
        return None
    return RateSchedule.piecewise(sched["rates_i"], sched.get("breakpoints", []), T,
                                  sched.get("rates_a"))


def _write(cfg: RunConfig, outputs: list, name: str) -> Path:
    outputs.append(name)
    return cfg.out / name


def _date_window(series: io.ObservationSeries, cfg: RunConfig) -> tuple[int, int | None]:
    train_end = series.day_index(cfg.train_end) if cfg.train_end else len(series) - 1
    test_end = series.day_index(cfg.test_end) if cfg.test_end else None
    if test_end is not None and test_end <= train_end:
        raise UsageError("--test-end must come after --train-end")
    return train_end, test_end


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, outputs: list) -> None:
    params, extra = _model_config(cfg)
    x0 = _initial_state(params, extra, cfg)
    sched = _schedule(params, extra, cfg, cfg.days)
    if sched is None:
        states = simulate_meanfield(build_transition_matrix(params), x0, cfg.days)
    else:
        states = simulate_meanfield_schedule(params, x0, sched, cfg.days)
    io.write_table(_write(cfg, outputs, "x_H.csv"), ["t", "x_H"],
                   ((t, x[-1]) for t, x in enumerate(states)))
    io.write_trajectory_long(_write(cfg, outputs, "trajectory.csv"), states, params.h)
    io.write_trajectory_wide(_write(cfg, outputs, "trajectory_wide.csv"), states, params.h)


def cmd_simulate_stochastic(cfg: RunConfig, outputs: list) -> None:
    params, extra = _model_config(cfg)
    x0 = _initial_state(params, extra, cfg)
    if np.any(x0 != np.round(x0)):
        raise UsageError("stochastic runs need integer initial counts")
    sched = _schedule(params, extra, cfg, cfg.days)
    reps = cfg.reps or 1
    tr = simulate_batch(x0.astype(np.int64), params, cfg.days, reps, cfg.seed, sched)
    io.write_table(_write(cfg, outputs, "x_H.csv"), ["t", "rep", "x_H"],
                   ((t, r, tr.x_H[r, t]) for r in range(reps) for t in range(cfg.days + 1)))
    xh = tr.x_H.astype(float)
    io.write_table(_write(cfg, outputs, "x_H_summary.csv"), ["t", "mean", "q025", "q975"],
                   ((t, xh[:, t].mean(), *np.quantile(xh[:, t], [0.025, 0.975]))
                    for t in range(cfg.days + 1)))
    io.write_trajectory_wide(_write(cfg, outputs, "trajectory_wide.csv"), tr.states[0], params.h)


def cmd_fit(cfg: RunConfig, outputs: list) -> None:
    if cfg.data is None or cfg.grid is None:
        raise UsageError("fit needs --data and --grid")
    params, _ = _model_config(cfg)
    series = io.load_observations(cfg.data)
    train_end, test_end = _date_window(series, cfg)
    grid = FitGrid.from_dict(io.load_structured(cfg.grid))
    res = grid_search_fit(series.counts[:train_end + 1], grid, n_reps=cfg.reps or 200,
                          loss_kind=cfg.loss, seed=cfg.seed, params=params,
                          refine_rounds=int(cfg.options.get("refine_rounds", 2)))
    if test_end is not None:
        res.pred_loss = prediction_error(res, series.counts[train_end + 1:test_end + 1],
                                         params=params)
    out = res.to_dict()
    out["start_date"] = series.start.isoformat()
    io.write_json(_write(cfg, outputs, "fit.json"), out)
    header = ["x_e0", "alpha1", "t2", "alpha2", "t3", "alpha3", "stage", "loss", "half_width"]
    io.write_table(_write(cfg, outputs, "grid_losses.csv"), header,
                   ([row[k] if row[k] is not None else "" for k in header] for row in res.table))


def cmd_predict(cfg: RunConfig, outputs: list) -> None:
    if cfg.fit is None or cfg.data is None:
        raise UsageError("predict needs --fit and --data")
    params, _ = _model_config(cfg)
    fit = FitResult.from_dict(json.loads(Path(cfg.fit).read_text()))
    series = io.load_observations(cfg.data)
    end = series.day_index(cfg.test_end) if cfg.test_end else len(series) - 1
    if end <= fit.train_end:
        raise UsageError("nothing to predict: --test-end is inside the training window")
    reps = cfg.reps or fit.n_reps
    sims = simulate_fit_params(fit.params_hat, params, end, reps, cfg.seed).astype(float)
    dates = series.dates
    rows = []
    for t in range(fit.train_end + 1, end + 1):
        q = np.quantile(sims[:, t], [0.025, 0.975])
        rows.append((dates[t].isoformat() if t < len(dates) else "", t, sims[:, t].mean(),
                     q[0], q[1], "" if t >= len(series) or np.isnan(series.counts[t])
                     else series.counts[t]))
    io.write_table(_write(cfg, outputs, "predictions.csv"),
                   ["date", "t", "mean", "q025", "q975", "observed"], rows)
    test = series.counts[fit.train_end + 1:end + 1]
    result = {"train_end": fit.train_end, "test_end": end, "n_reps": reps}
    if np.any(~np.isnan(test)):
        est = prediction_error(fit, test, n_reps=reps, seed=cfg.seed, params=params)
        result["pred_loss"] = {"mean": est.mean, "half_width": est.half_width}
    io.write_json(_write(cfg, outputs, "prediction.json"), result)


def cmd_filter(cfg: RunConfig, outputs: list) -> None:
    if cfg.data is None:
        raise UsageError("filter needs --data")
    params, extra = _model_config(cfg)
    series = io.load_observations(cfg.data)
    x0 = _initial_state(params, extra, cfg)
    T = len(series) - 1
    sched = _schedule(params, extra, cfg, T)
    r = cfg.options.get("measurement_noise", "poisson")
    R_policy = r if r == "poisson" else float(r)
    states = filter_series(series.counts[1:], params, x0, R_policy=R_policy,
                           noise=cfg.options.get("noise_weights", "filtered"), schedule=sched)
    labels = []
    for j in range(params.dim):
        phase, day = index_to_state(j, params.h)
        labels.append(phase if day is None else f"{phase}:{day}")
    dates = series.dates
    rows = []
    for st in states:
        x = np.maximum(st.x_hat, 0.0)  # clamp for presentation only
        sd = st.std
        for j in np.flatnonzero((x > 0) | (sd > 0)):
            rows.append((dates[st.t].isoformat(), st.t, labels[j], x[j], sd[j]))
    io.write_table(_write(cfg, outputs, "filtered.csv"),
                   ["date", "t", "coordinate", "x_hat", "std"], rows)
    inn = []
    for st in states[1:]:
        if st.innovation is None:
            continue
        inn.append((dates[st.t].isoformat(), st.t, st.innovation[0], st.innovation_cov[0, 0],
                    st.standardized_innovation()[0]))
    io.write_table(_write(cfg, outputs, "innovations.csv"),
                   ["date", "t", "innovation", "variance", "standardized"], inn)
    negative = int(sum(np.any(st.x_hat < 0) for st in states))
    io.write_json(_write(cfg, outputs, "filter_summary.json"),
                  {"days": len(states), "days_with_negative_estimates": negative,
                   "missing_days": int(series.missing[1:].sum())})


def cmd_spectral(cfg: RunConfig, outputs: list) -> None:
    params, _ = _model_config(cfg)
    ai = cfg.options.get("alpha_i")
    aa = cfg.options.get("alpha_a")
    M = build_transition_matrix(params, ai, aa)
    rho, u = spectral_radius(M)
    io.write_json(_write(cfg, outputs, "spectral.json"),
                  {"rho": rho, "alpha_i": M.alpha_i, "alpha_a": M.alpha_a,
                   "dense_check": perron_oracle(M), "eigenvector": u.tolist()})


def cmd_tracing_sweep(cfg: RunConfig, outputs: list) -> None:
    params, _ = _model_config(cfg)
    p_ts = cfg.options.get("p_t") or [0.0, 0.25, 0.5, 0.75, 1.0]
    eps = cfg.options.get("epsilon") or [0.0, 0.25, 0.5, 0.75, 1.0]
    rows = tracing_sweep(params, p_ts, eps, cfg.options.get("d_max"))
    io.write_table(_write(cfg, outputs, "tracing_sweep.csv"),
                   ["p_t", "epsilon", "rho", "expected_total_infected"],
                   ((r.p_t, r.epsilon, r.rho, "" if np.isnan(r.expected_total) else r.expected_total)
                    for r in rows))


def _cohort_setup(cfg: RunConfig):
    if cfg.config is None:
        raise UsageError(f"{cfg.command} needs --config with a cohort description")
    data = io.load_structured(cfg.config)
    if "cohorts" not in data:
        raise io.DataError(f"{cfg.config}: missing 'cohorts' list")
    return data


def cmd_routing(cfg: RunConfig, outputs: list) -> None:
    data = _cohort_setup(cfg)
    base = baseline_params().to_dict()
    base.update({k: v for k, v in data.get("params", {}).items()})
    shared = DiseaseParams.from_dict(base)
    cohorts, params, states, N = [], [], [], []
    for c in data["cohorts"]:
        cohorts.append(str(c["id"]))
        if "params" in c:
            own = dict(base)
            own.update(c["params"])
            params.append(DiseaseParams.from_dict(own))
        else:
            params.append(shared)
        entries = {}
        for key, v in (c.get("initial") or {}).items():
            phase, _, day = str(key).partition(":")
            entries[(phase, int(day) if day else (None if phase == "H" else 1))] = float(v)
        states.append(new_state(shared.h, entries))
        N.append(float(c["N"]))
    N = np.array(N)
    if "alpha" in data:
        alpha = np.asarray(data["alpha"], dtype=float)
    else:
        alpha = infection_rate_matrix(data["contacts"]["q"], data["contacts"]["n"], N)
    R = np.asarray(data.get("routing", np.eye(len(cohorts))), dtype=float)
    system = CohortSystem(cohorts, params, np.array(states), N, alpha, R,
                          arrivals=data.get("arrivals"))
    traj = simulate_cohorts(system, cfg.days)
    io.write_table(_write(cfg, outputs, "x_H.csv"), ["t"] + cohorts,
                   ([t] + list(traj.x_H[t]) for t in range(cfg.days + 1)))
    io.write_table(_write(cfg, outputs, "population.csv"), ["t"] + cohorts,
                   ([t] + list(traj.N[t]) for t in range(cfg.days + 1)))


def cmd_routing_estimate(cfg: RunConfig, outputs: list) -> None:
    if cfg.flows is None:
        raise UsageError("routing-estimate needs --flows")
    data = _cohort_setup(cfg)
    cohorts = [tuple(str(v) for v in (c["region"], c["previous_region"], c["age"]))
               for c in data["cohorts"]]
    N = np.array([float(c["N"]) for c in data["cohorts"]])
    flows = io.load_flows(cfg.flows)
    rows, summary = [], []
    for date in sorted(flows):
        est = maxent_routing(cohorts, N, flows[date])
        for i, j in zip(*np.nonzero(est.R)):
            rows.append((date.isoformat(), "/".join(cohorts[i]), "/".join(cohorts[j]), est.R[i, j]))
        summary.append({"date": date.isoformat(), "entropy": est.objective,
                        "flow_residual": est.flow_residual, "iterations": est.iterations})
    io.write_table(_write(cfg, outputs, "routing_estimate.csv"), ["date", "from", "to", "R"], rows)
    io.write_json(_write(cfg, outputs, "routing_summary.json"), summary)


HANDLERS = {
    "simulate": cmd_simulate,
    "simulate-stochastic": cmd_simulate_stochastic,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "filter": cmd_filter,
    "spectral": cmd_spectral,
    "tracing-sweep": cmd_tracing_sweep,
    "routing": cmd_routing,
    "routing-estimate": cmd_routing_estimate,
}


def run(cfg: RunConfig) -> int:
    """Dispatch ``cfg.command``; returns the exit status."""
    try:
        cfg.validate()
        cfg.out = Path(cfg.out)
        cfg.out.mkdir(parents=True, exist_ok=True)
        outputs: list[str] = []
        HANDLERS[cfg.command](cfg, outputs)
        io.write_manifest(cfg.out, cfg.command, cfg.describe(), cfg.seed, outputs)
        return 0
    except Exception as err:  # surfaced as machine-readable JSON
        return _fail(cfg, err)


def _fail(cfg: RunConfig | None, err: Exception) -> int:
    payload = {"error": type(err).__name__, "message": str(err),
               "command": None if cfg is None else cfg.command}
    print(json.dumps(payload), file=sys.stderr)
    if cfg is not None and cfg.out is not None and Path(cfg.out).is_dir():
        (Path(cfg.out) / "error.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 2 if isinstance(err, UsageError) else 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message, "command": None}),
              file=sys.stderr)
        raise SystemExit(2)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="branchepi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="model parameters or cohort description (YAML/JSON)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int)

    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("simulate", "simulate-stochastic", "routing"):
            p.add_argument("--days", type=int, default=60)
        if name in ("simulate", "simulate-stochastic", "filter"):
            p.add_argument("--initial-exposed", type=float, default=200)
            p.add_argument("--mobility", type=Path, help="date,outflow_count CSV")
        if name in ("simulate-stochastic", "fit", "predict"):
            p.add_argument("--reps", type=int)
        if name in ("fit", "predict", "filter"):
            p.add_argument("--data", type=Path, required=True, help="date,count CSV")
        if name in ("fit", "predict"):
            p.add_argument("--test-end")
        if name == "fit":
            p.add_argument("--grid", type=Path, required=True)
            p.add_argument("--loss", choices=("l1", "l1log"), default="l1log")
            p.add_argument("--train-end")
            p.add_argument("--refine-rounds", type=int, default=2)
        if name == "predict":
            p.add_argument("--fit", type=Path, required=True, help="fit.json from the fit command")
        if name == "filter":
            p.add_argument("--measurement-noise", default="poisson",
                           help="'poisson' (variance max(y,1)) or a constant variance")
            p.add_argument("--noise-weights", choices=("filtered", "open_loop", "none"),
                           default="filtered")
        if name == "spectral":
            p.add_argument("--alpha-i", type=float)
            p.add_argument("--alpha-a", type=float)
        if name == "tracing-sweep":
            p.add_argument("--p-t", type=_floats)
            p.add_argument("--epsilon", type=_floats)
            p.add_argument("--d-max", type=int)
        if name == "routing-estimate":
            p.add_argument("--flows", type=Path, required=True, help="date,r1,r2,age,count CSV")
    return parser


def parse_config(argv: Sequence[str] | None = None) -> RunConfig:
    ns = vars(build_parser().parse_args(argv))
    known = {k: ns.pop(k) for k in list(ns) if k in RunConfig.__dataclass_fields__}
    if known.get("loss") is None:
        known.pop("loss", None)
    for k in ("days", "initial_exposed"):
        if known.get(k) is None:
            known.pop(k, None)
    return RunConfig(**known, options={k: v for k, v in ns.items() if v is not None})


def main(argv: Sequence[str] | None = None) -> int:
    cfg = parse_config(argv)
    return run(cfg)


if __name__ == "__main__":
    raise SystemExit(main())
