"""Stochastic engine: the multi-type branching process, sampled day by day.

Survival in each phase is binomial, new exposures are Poisson, and branch
choices are binomial with the complementary branch taking the remainder,
so every counting identity holds path-wise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (PHASES, DiseaseParams, RateSchedule, block, index_to_state,
                   state_index, validate_state)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``seed``; ``keys`` select an independent substream."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


class _Stepper:
    """Precomputed per-phase masks so that only uncertain cells draw randomness."""

    def __init__(self, params: DiseaseParams):
        self.params = params
        h = self.h = params.h
        self.blocks = {p: block(p, h) for p in PHASES}
        self.keep = {}
        self.partial = {}
        self.sure = {}
        self.exit_h = {}
        for p in PHASES:
            r = params.rates(p)
            keep = 1.0 - r[:-1]
            self.keep[p] = keep
            self.partial[p] = np.flatnonzero((keep > 0) & (keep < 1))
            self.sure[p] = np.flatnonzero(keep == 1)
            self.exit_h[p] = r[-1]
        self.iE1 = state_index("E", 1, h)
        self.iP1 = state_index("P", 1, h)
        self.iI11 = state_index("I1", 1, h)
        self.iA1 = state_index("A", 1, h)
        self.iI21 = state_index("I2", 1, h)
        self.iH = state_index("H", None, h)

    def _age(self, X, phase, rng):
        """Age one block; returns (aged block with empty day-1 slot, exits, lost)."""
        blk = X[:, self.blocks[phase]]
        surv = np.zeros_like(blk[:, :-1])
        sure = self.sure[phase]
        surv[:, sure] = blk[:, sure]
        part = self.partial[phase]
        if part.size:
            surv[:, part] = rng.binomial(blk[:, part], self.keep[phase][part])
        exits = (blk[:, :-1] - surv).sum(axis=1)
        last = blk[:, -1]
        rh = self.exit_h[phase]
        if rh == 1.0:
            exit_last = last
        elif rh == 0.0:
            exit_last = np.zeros_like(last)
        else:
            exit_last = rng.binomial(last, rh)
        aged = np.zeros_like(blk)
        aged[:, 1:] = surv
        return aged, exits + exit_last, last - exit_last

    def step(self, X: np.ndarray, alpha_i: float, alpha_a: float, rng: np.random.Generator):
        """One day for a ``(n, dim)`` batch; returns (next state, removed count per row)."""
        p = self.params
        b = self.blocks
        infectious_i = X[:, b["I1"]].sum(axis=1) + X[:, b["I2"]].sum(axis=1)
        infectious_a = X[:, b["A"]].sum(axis=1) + X[:, b["P"]].sum(axis=1)
        lam = alpha_i * infectious_i + alpha_a * infectious_a
        out = np.zeros_like(X)
        removed = X[:, self.iH].copy()
        exits = {}
        for phase in PHASES:
            aged, ex, lost = self._age(X, phase, rng)
            out[:, b[phase]] = aged
            exits[phase] = ex
            removed += lost
        out[:, self.iE1] = rng.poisson(lam)
        out[:, self.iP1] = exits["E"]
        to_i1 = rng.binomial(exits["P"], p.p_i)
        out[:, self.iI11] = to_i1
        out[:, self.iA1] = exits["P"] - to_i1
        to_i2 = rng.binomial(exits["I1"], 1.0 - p.p_h)
        out[:, self.iI21] = to_i2
        out[:, self.iH] = exits["I1"] - to_i2
        removed += exits["A"] + exits["I2"]
        return out, removed


def step_stochastic(X: np.ndarray, params: DiseaseParams, rng: np.random.Generator,
                    alpha_i: float | None = None, alpha_a: float | None = None) -> np.ndarray:
    """Sample ``X(t+1)`` given the integer state ``X(t)`` (1-D or a batch of rows)."""
    X = np.asarray(X)
    if not np.issubdtype(X.dtype, np.integer):
        if np.any(X != np.round(X)):
            raise ValueError("stochastic state must be integer-valued")
        X = X.astype(np.int64)
    validate_state(X, params.h)
    ai = params.alpha_i if alpha_i is None else alpha_i
    aa = params.alpha_a if alpha_a is None else alpha_a
    batch = np.atleast_2d(X).astype(np.int64)
    out, _ = _Stepper(params).step(batch, ai, aa, rng)
    return out[0] if X.ndim == 1 else out


@dataclass(frozen=True)
class StochasticTrajectory:
    """States on days 0..T; ``states`` is ``(T+1, dim)`` or ``(n_reps, T+1, dim)``.

    With ``keep="H"`` only the ``x_H`` column is stored and ``states`` drops
    the last axis. ``removed`` counts individuals leaving the system each
    day (day-0 entry is zero).
    """

    states: np.ndarray
    seed: int
    schedule: RateSchedule | None
    removed: np.ndarray
    h: int
    keep: str = "all"

    @property
    def x_H(self) -> np.ndarray:
        if self.keep == "H":
            return self.states
        return self.states[..., state_index("H", None, self.h)]


def _resolve_schedule(params: DiseaseParams, schedule, T: int) -> RateSchedule:
    if schedule is None:
        return RateSchedule.constant(params.alpha_i, params.alpha_a, T)
    if len(schedule) < T:
        raise ValueError(f"schedule covers {len(schedule)} days, {T} requested")
    return schedule


def simulate_batch(x0: np.ndarray, params: DiseaseParams, T: int, n_reps: int, seed: int,
                   schedule: RateSchedule | None = None, keep: str = "all",
                   stream: Sequence[int] = ()) -> StochasticTrajectory:
    """``n_reps`` independent trajectories drawn together from one substream.

    ``x0`` is a single state shared by all replications or an ``(n_reps, dim)``
    array. ``stream`` extends the seed with substream keys; passing the same
    seed and stream to different parameter values gives common random
    numbers.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    sched = _resolve_schedule(params, schedule, T)
    x0 = np.asarray(x0)
    if np.any(x0 != np.round(x0)):
        raise ValueError("initial state must be integer-valued")
    validate_state(x0, params.h)
    X = np.broadcast_to(x0.astype(np.int64), (n_reps, params.dim)).copy()
    rng = make_rng(seed, *stream)
    stepper = _Stepper(params)
    ih = state_index("H", None, params.h)
    if keep == "all":
        states = np.empty((n_reps, T + 1, params.dim), dtype=np.int64)
        states[:, 0] = X
    elif keep == "H":
        states = np.empty((n_reps, T + 1), dtype=np.int64)
        states[:, 0] = X[:, ih]
    else:
        raise ValueError("keep must be 'all' or 'H'")
    removed = np.zeros((n_reps, T + 1), dtype=np.int64)
    for t in range(T):
        ai, aa = sched.at(t)
        X, removed[:, t + 1] = stepper.step(X, ai, aa, rng)
        if keep == "all":
            states[:, t + 1] = X
        else:
            states[:, t + 1] = X[:, ih]
    return StochasticTrajectory(states, seed, schedule, removed, params.h, keep)


def simulate_stochastic(x0: np.ndarray, params: DiseaseParams, T: int, seed: int,
                        schedule: RateSchedule | None = None) -> StochasticTrajectory:
    """Single trajectory; a fixed seed gives a bit-identical result."""
    tr = simulate_batch(x0, params, T, 1, seed, schedule)
    return StochasticTrajectory(tr.states[0], seed, schedule, tr.removed[0], params.h)


@dataclass(frozen=True)
class OffspringCovariance:
    """Covariance of the one-day child vector of a single parent.

    ``coords`` are state indices; ``S`` is the covariance restricted to them.
    """

    parent: tuple[str, int | None]
    coords: np.ndarray
    S: np.ndarray
    mean: np.ndarray

    def dense(self, dim: int) -> np.ndarray:
        out = np.zeros((dim, dim))
        out[np.ix_(self.coords, self.coords)] = self.S
        return out


_EXIT_BRANCHES = {
    "E": lambda p: [("P", 1.0)],
    "P": lambda p: [("I1", p.p_i), ("A", 1.0 - p.p_i)],
    "I1": lambda p: [("I2", 1.0 - p.p_h), ("H", p.p_h)],
    "A": lambda p: [],
    "I2": lambda p: [],
}


def offspring_covariance(parent: tuple[str, int | None], params: DiseaseParams,
                         alpha_i: float | None = None,
                         alpha_a: float | None = None) -> OffspringCovariance:
    """Closed-form child covariance for a parent of type ``(phase, day)``.

    The Poisson exposures are independent of the parent's own fate and add
    ``alpha`` on the (E,1) diagonal. The parent's fate (stay one more day,
    or leave into one of the branches) is a single categorical draw, whose
    indicator vector has covariance ``diag(q) - q q^T``.
    """
    h = params.h
    phase, day = parent
    if phase == "H":
        return OffspringCovariance(parent, np.zeros(0, dtype=int), np.zeros((0, 0)), np.zeros(0))
    if day is None or not 1 <= day <= h:
        raise ValueError(f"day {day} outside 1..{h}")
    ai = params.alpha_i if alpha_i is None else alpha_i
    aa = params.alpha_a if alpha_a is None else alpha_a
    alpha = {"E": 0.0, "P": aa, "A": aa, "I1": ai, "I2": ai}[phase]
    r = params.rates(phase)[day - 1]

    outcomes: dict[int, float] = {}
    if day < h:
        outcomes[state_index(phase, day + 1, h)] = 1.0 - r
    for target, w in _EXIT_BRANCHES[phase](params):
        idx = state_index(target, None if target == "H" else 1, h)
        outcomes[idx] = outcomes.get(idx, 0.0) + r * w
    outcomes = {k: v for k, v in outcomes.items() if v > 0}

    e1 = state_index("E", 1, h)
    coords = sorted(set(outcomes) | ({e1} if alpha > 0 else set()))
    pos = {c: i for i, c in enumerate(coords)}
    S = np.zeros((len(coords), len(coords)))
    mean = np.zeros(len(coords))
    q = np.zeros(len(coords))
    for c, v in outcomes.items():
        q[pos[c]] = v
    S += np.diag(q) - np.outer(q, q)
    mean += q
    if alpha > 0:
        S[pos[e1], pos[e1]] += alpha
        mean[pos[e1]] += alpha
    return OffspringCovariance(parent, np.array(coords, dtype=int), S, mean)


def offspring_covariances(params: DiseaseParams, alpha_i: float | None = None,
                          alpha_a: float | None = None) -> list[OffspringCovariance]:
    """:func:`offspring_covariance` for every type, in state-vector order."""
    return [offspring_covariance(index_to_state(j, params.h), params, alpha_i, alpha_a)
            for j in range(params.dim)]
