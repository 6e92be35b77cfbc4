"""Monte Carlo grid-search fitting of a three-phase contact-rate model to a
daily hospital-admission series.

The six unknowns are the initial number of exposed individuals, the rate in
each of three lockdown phases and the two days on which the rate changes.
Every grid point is scored by simulating ``n_reps`` stochastic trajectories
from the same seed (common random numbers), which keeps comparisons between
neighbouring points far less noisy than independent draws would.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .branching import make_rng, _Stepper
from .core import DiseaseParams, RateSchedule, baseline_params, state_index

Z95 = 1.96
FLOORS = ("max1", "log1p")


@dataclass(frozen=True)
class LossEstimate:
    mean: float
    half_width: float

    def __iter__(self):
        yield self.mean
        yield self.half_width


def _per_replication(simulated, observed) -> tuple[np.ndarray, np.ndarray]:
    sim = np.atleast_2d(np.asarray(simulated, dtype=float))
    obs = np.asarray(observed, dtype=float)
    if sim.shape[1] != obs.size:
        raise ValueError(f"simulated covers {sim.shape[1]} days, observed {obs.size}")
    keep = ~np.isnan(obs)
    if not keep.any():
        raise ValueError("no observed days to compare")
    return sim[:, keep], obs[keep]


def _summarize(per_rep: np.ndarray) -> LossEstimate:
    n = per_rep.size
    half = Z95 * per_rep.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return LossEstimate(float(per_rep.mean()), float(half))


def loss_l1(simulated, observed) -> LossEstimate:
    """Mean absolute daily error, averaged over replications, with a 95% half-width.

    ``simulated`` is ``(n_reps, T+1)`` (or one trajectory); NaN days in
    ``observed`` are skipped.
    """
    sim, obs = _per_replication(simulated, observed)
    return _summarize(np.abs(sim - obs).mean(axis=1))


def log_counts(x, floor: str = "max1") -> np.ndarray:
    """``log(max(x, 1))`` by default, ``log(1 + x)`` with ``floor="log1p"``."""
    x = np.asarray(x, dtype=float)
    if floor == "max1":
        return np.log(np.maximum(x, 1.0))
    if floor == "log1p":
        return np.log1p(np.maximum(x, 0.0))
    raise ValueError(f"unknown floor {floor!r}; expected one of {FLOORS}")


def loss_l1_log(simulated, observed, floor: str = "max1") -> LossEstimate:
    """Mean absolute daily error between log counts (zero counts floored)."""
    sim, obs = _per_replication(simulated, observed)
    return _summarize(np.abs(log_counts(sim, floor) - log_counts(obs, floor)).mean(axis=1))


LOSSES = {"l1": loss_l1, "l1log": loss_l1_log}


@dataclass(frozen=True)
class PhaseSchedule:
    """Three contact-rate phases split at days ``t2 < t3``; ``alpha_a = alpha_i``."""

    breakpoints: tuple[int, int]
    rates: tuple[float, float, float]

    def __post_init__(self):
        t2, t3 = self.breakpoints
        if not 0 < t2 < t3:
            raise ValueError(f"breakpoints must satisfy 0 < t2 < t3, got {self.breakpoints}")
        if min(self.rates) < 0:
            raise ValueError("rates must be nonnegative")

    def to_schedule(self, T: int) -> RateSchedule:
        return RateSchedule.piecewise(self.rates, self.breakpoints, T)


@dataclass(frozen=True)
class FitParams:
    x_e0: int
    alpha1: float
    t2: int
    alpha2: float
    t3: int
    alpha3: float

    @property
    def phases(self) -> PhaseSchedule:
        return PhaseSchedule((self.t2, self.t3), (self.alpha1, self.alpha2, self.alpha3))

    def as_tuple(self) -> tuple:
        return (self.x_e0, self.alpha1, self.t2, self.alpha2, self.t3, self.alpha3)


FIELDS = ("x_e0", "alpha1", "t2", "alpha2", "t3", "alpha3")
INTEGER_FIELDS = ("x_e0", "t2", "t3")


@dataclass(frozen=True)
class FitGrid:
    """Candidate values per unknown; the search visits their Cartesian product."""

    x_e0: tuple
    alpha1: tuple
    t2: tuple
    alpha2: tuple
    t3: tuple
    alpha3: tuple

    def __post_init__(self):
        for name in FIELDS:
            vals = tuple(sorted(set(np.atleast_1d(getattr(self, name)).tolist())))
            if not vals:
                raise ValueError(f"grid axis {name} is empty")
            if name in INTEGER_FIELDS:
                vals = tuple(int(v) for v in vals)
            object.__setattr__(self, name, vals)

    @classmethod
    def from_dict(cls, data: Mapping) -> "FitGrid":
        missing = [k for k in FIELDS if k not in data]
        if missing:
            raise ValueError(f"grid is missing axes {missing}")
        return cls(**{k: _axis(data[k]) for k in FIELDS})

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in FIELDS}

    def points(self, T: int):
        for combo in itertools.product(*(getattr(self, k) for k in FIELDS)):
            p = dict(zip(FIELDS, combo))
            if 0 < p["t2"] < p["t3"] <= T and p["x_e0"] >= 0:
                yield FitParams(**p)

    def size(self) -> int:
        return int(np.prod([len(getattr(self, k)) for k in FIELDS]))


def _axis(spec) -> tuple:
    """Axis from a list of values or a ``{start, stop, step}`` range (stop included)."""
    if isinstance(spec, Mapping):
        n = int(round((spec["stop"] - spec["start"]) / spec["step"])) + 1
        return tuple(np.round(spec["start"] + spec["step"] * np.arange(n), 12).tolist())
    return tuple(np.atleast_1d(spec).tolist())


@dataclass
class FitResult:
    params_hat: FitParams
    train_loss: LossEstimate
    n_reps: int
    loss_kind: str
    seed: int
    train_end: int
    pred_loss: LossEstimate | None = None
    table: list = field(default_factory=list, repr=False)

    def to_dict(self, with_table: bool = False) -> dict:
        out = {
            "params_hat": asdict(self.params_hat),
            "train_loss": asdict(self.train_loss),
            "pred_loss": None if self.pred_loss is None else asdict(self.pred_loss),
            "n_reps": self.n_reps,
            "loss_kind": self.loss_kind,
            "seed": self.seed,
            "train_end": self.train_end,
        }
        if with_table:
            out["table"] = self.table
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "FitResult":
        pred = data.get("pred_loss")
        return cls(FitParams(**data["params_hat"]), LossEstimate(**data["train_loss"]),
                   int(data["n_reps"]), data["loss_kind"], int(data["seed"]),
                   int(data["train_end"]), None if pred is None else LossEstimate(**pred),
                   list(data.get("table", [])))


def initial_exposed(x_e0: int, params: DiseaseParams, n_reps: int,
                    rng: np.random.Generator) -> np.ndarray:
    """``(n_reps, dim)`` initial states with ``x_e0`` exposed spread over E days by ``p_E``."""
    X = np.zeros((n_reps, params.dim), dtype=np.int64)
    pmf = params.durations["E"].pmf
    X[:, :params.h] = rng.multinomial(int(x_e0), pmf / pmf.sum(), size=n_reps)
    return X


def simulate_fit_params(fp: FitParams, params: DiseaseParams, T: int, n_reps: int,
                        seed: int) -> np.ndarray:
    """``(n_reps, T+1)`` admission trajectories under the three-phase model."""
    rng = make_rng(seed)
    X = initial_exposed(fp.x_e0, params, n_reps, rng)
    sched = fp.phases.to_schedule(T)
    stepper = _Stepper(params)
    ih = state_index("H", None, params.h)
    out = np.empty((n_reps, T + 1), dtype=np.int64)
    out[:, 0] = X[:, ih]
    for t in range(T):
        ai, aa = sched.at(t)
        X, _ = stepper.step(X, ai, aa, rng)
        out[:, t + 1] = X[:, ih]
    return out


class _Snapshot:
    """Batch state, admission history and generator state on a given day."""

    def __init__(self, X, hist, rng):
        self.X = X.copy()
        self.hist = hist.copy()
        self.rng_state = rng.bit_generator.state

    def restore(self):
        rng = np.random.Generator(np.random.Philox())
        rng.bit_generator.state = self.rng_state
        return self.X.copy(), self.hist.copy(), rng


def _advance(stepper, X, hist, rng, t_from, t_to, alpha, ih, marks=()):
    """Step days ``t_from..t_to-1`` at a constant rate; snapshot at each day in ``marks``."""
    snaps = {}
    for t in range(t_from, t_to):
        if t in marks:
            snaps[t] = _Snapshot(X, hist, rng)
        X, _ = stepper.step(X, alpha, alpha, rng)
        hist[:, t + 1] = X[:, ih]
    if t_to in marks:
        snaps[t_to] = _Snapshot(X, hist, rng)
    return X, hist, snaps


def simulate_points(points, params: DiseaseParams, T: int, n_reps: int, seed: int):
    """Yield ``(point, trajectories)`` for many three-phase points at once.

    Points sharing ``(x_e0, alpha1)`` share every day before ``t2``, and
    those also sharing ``(t2, alpha2)`` share every day before ``t3``. With
    one seed for all points those prefixes are identical draws, so they are
    simulated once and resumed from snapshots. Output equals
    :func:`simulate_fit_params` point by point.
    """
    stepper = _Stepper(params)
    ih = state_index("H", None, params.h)
    tree: dict = {}
    for fp in points:
        tree.setdefault((fp.x_e0, fp.alpha1), {}).setdefault((fp.t2, fp.alpha2), []).append(fp)
    for (x_e0, a1), mids in tree.items():
        rng = make_rng(seed)
        X = initial_exposed(x_e0, params, n_reps, rng)
        hist = np.zeros((n_reps, T + 1), dtype=np.int64)
        hist[:, 0] = X[:, ih]
        t2s = sorted({t2 for t2, _ in mids})
        _, _, snaps2 = _advance(stepper, X, hist, rng, 0, t2s[-1], a1, ih, set(t2s))
        for (t2, a2), leaves in mids.items():
            t3s = sorted({fp.t3 for fp in leaves})
            X, hist, rng = snaps2[t2].restore()
            _, _, snaps3 = _advance(stepper, X, hist, rng, t2, t3s[-1], a2, ih, set(t3s))
            for fp in leaves:
                X, hist, rng = snaps3[fp.t3].restore()
                _, hist, _ = _advance(stepper, X, hist, rng, fp.t3, T, fp.alpha3, ih)
                yield fp, hist


def _refined_axis(values: tuple, best, integer: bool, lower: float) -> tuple:
    if len(values) < 2:
        return (best,)
    vals = np.asarray(values, dtype=float)
    k = int(np.searchsorted(vals, best))
    gaps = np.diff(vals)
    step = gaps[min(max(k - 1, 0), gaps.size - 1)] if k in (0, vals.size) else min(
        gaps[k - 1] if k > 0 else np.inf, gaps[k] if k < gaps.size else np.inf)
    half = step / 2
    if integer:
        half = max(1, int(round(half)))
        cand = {best - half, best, best + half}
        return tuple(sorted(int(c) for c in cand if c >= lower))
    cand = {round(best - half, 12), best, round(best + half, 12)}
    return tuple(sorted(c for c in cand if c >= lower))


def refine_grid(grid: FitGrid, best: FitParams, current: FitGrid | None = None) -> FitGrid:
    """Three-point grid around ``best`` with half the local spacing of ``current``."""
    current = grid if current is None else current
    axes = {}
    for name in FIELDS:
        lower = 1 if name in ("t2", "t3") else 0
        axes[name] = _refined_axis(getattr(current, name), getattr(best, name),
                                   name in INTEGER_FIELDS, lower)
    return FitGrid(**axes)


def grid_search_fit(observed: Sequence[float], grid: FitGrid | Mapping, n_reps: int = 200,
                    loss_kind: str = "l1log", seed: int = 0,
                    params: DiseaseParams | None = None, refine_rounds: int = 2,
                    floor: str = "max1", progress=None) -> FitResult:
    """Exhaustive search over ``grid`` followed by ``refine_rounds`` local halvings.

    ``observed`` covers days ``0..T``. Each point is scored with ``n_reps``
    trajectories drawn from ``seed``; the table of every evaluated point is
    kept on the result.
    """
    if loss_kind not in LOSSES:
        raise ValueError(f"unknown loss {loss_kind!r}; expected one of {sorted(LOSSES)}")
    grid = FitGrid.from_dict(grid) if isinstance(grid, Mapping) else grid
    params = baseline_params() if params is None else params
    obs = np.asarray(observed, dtype=float)
    T = obs.size - 1
    if T < 1:
        raise ValueError("observed series needs at least two days")

    def score(sims) -> LossEstimate:
        if loss_kind == "l1log":
            return loss_l1_log(sims, obs, floor)
        return loss_l1(sims, obs)

    cache: dict[tuple, LossEstimate] = {}
    table = []

    def sweep(g: FitGrid, stage: int):
        todo = [fp for fp in g.points(T) if fp.as_tuple() not in cache]
        for fp, sims in simulate_points(todo, params, T, n_reps, seed):
            try:
                est = score(sims)
            except (ValueError, FloatingPointError) as err:
                est = LossEstimate(float("nan"), float("nan"))
                table.append({**asdict(fp), "stage": stage, "loss": None, "half_width": None,
                              "error": str(err)})
            else:
                table.append({**asdict(fp), "stage": stage, "loss": est.mean,
                              "half_width": est.half_width})
            cache[fp.as_tuple()] = est
            if progress is not None:
                progress(len(cache))

    def incumbent():
        finite = [(v.mean, k) for k, v in cache.items() if np.isfinite(v.mean)]
        if not finite:
            raise ValueError(f"no grid point produced a finite loss ({len(cache)} evaluated)")
        return FitParams(*min(finite)[1])

    sweep(grid, 0)
    if not cache:
        raise ValueError("grid has no admissible point (need 0 < t2 < t3 <= T)")
    current = grid
    for stage in range(1, refine_rounds + 1):
        current = refine_grid(grid, incumbent(), current)
        sweep(current, stage)
    best = incumbent()
    return FitResult(best, cache[best.as_tuple()], n_reps, loss_kind, seed, T, table=table)


def prediction_error(fit: FitResult, observed_test: Sequence[float], n_reps: int | None = None,
                     seed: int | None = None, params: DiseaseParams | None = None,
                     test_start: int | None = None) -> LossEstimate:
    """Mean absolute error on held-out days, simulating from day 0 with the fitted values.

    ``observed_test`` covers days ``test_start..T_pred`` (default start is
    the day after the training window).
    """
    test = np.asarray(observed_test, dtype=float)
    if test.size == 0:
        raise ValueError("empty test window")
    start = fit.train_end + 1 if test_start is None else int(test_start)
    params = baseline_params() if params is None else params
    n = fit.n_reps if n_reps is None else n_reps
    s = fit.seed if seed is None else seed
    T_pred = start + test.size - 1
    sims = simulate_fit_params(fit.params_hat, params, T_pred, n, s)
    return loss_l1(sims[:, start:], test)
