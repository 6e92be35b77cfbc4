"""Disease parameters, phase-duration laws and the shared state-vector layout.

The state vector of a single population on day ``t`` is laid out as::

    (x_E[1..h], x_P[1..h], x_I1[1..h], x_A[1..h], x_I2[1..h], x_H)

so it has ``5h + 1`` entries. ``x_{tau,d}`` counts individuals that have
spent ``d`` days in phase ``tau``; ``x_H`` counts new hospital admissions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

PHASES = ("E", "P", "I1", "A", "I2")
"""Phases with a day index, in state-vector block order."""

INFECTIOUS_I = ("I1", "I2")
INFECTIOUS_A = ("P", "A")

DEFAULT_HORIZON = 25
PMF_TOL = 1e-12


@dataclass(frozen=True)
class PhaseDurationDist:
    """Probability that ``phase`` lasts ``d`` days, stored densely for d = 1..h."""

    phase: str
    pmf: np.ndarray

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        pmf = np.array(self.pmf, dtype=float)
        if pmf.ndim != 1 or pmf.size == 0:
            raise ValueError("pmf must be a non-empty 1-D vector")
        if np.any(pmf < 0) or np.any(pmf > 1):
            raise ValueError(f"pmf of {self.phase} has entries outside [0, 1]")
        if abs(pmf.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"pmf of {self.phase} sums to {pmf.sum()!r}, not 1")
        pmf.setflags(write=False)
        object.__setattr__(self, "pmf", pmf)

    def __eq__(self, other):
        if not isinstance(other, PhaseDurationDist):
            return NotImplemented
        return self.phase == other.phase and np.array_equal(self.pmf, other.pmf)

    __hash__ = None

    @classmethod
    def from_support(cls, phase: str, probs: Mapping[int, float], h: int) -> "PhaseDurationDist":
        pmf = np.zeros(h)
        for d, p in probs.items():
            if not 1 <= d <= h:
                raise ValueError(f"duration {d} outside 1..{h}")
            pmf[d - 1] = p
        return cls(phase, pmf)

    @property
    def h(self) -> int:
        return self.pmf.size

    @property
    def support(self) -> np.ndarray:
        """Durations (in days, 1-based) with positive probability."""
        return np.flatnonzero(self.pmf > 0) + 1

    @property
    def max_duration(self) -> int:
        return int(self.support.max())

    def padded(self, h: int) -> "PhaseDurationDist":
        if h < self.max_duration:
            raise ValueError(f"horizon {h} shorter than support of {self.phase}")
        pmf = np.zeros(h)
        n = min(h, self.h)
        pmf[:n] = self.pmf[:n]
        return PhaseDurationDist(self.phase, pmf)


def failure_rates(dist: PhaseDurationDist) -> np.ndarray:
    """Conditional exit probabilities ``r(d) = p(d) / P(D >= d)`` for d = 1..h.

    Days with no remaining tail mass get rate 0.
    """
    pmf = dist.pmf
    tail = np.cumsum(pmf[::-1])[::-1]
    rates = np.zeros_like(pmf)
    pos = tail > 0
    rates[pos] = pmf[pos] / tail[pos]
    return np.clip(rates, 0.0, 1.0)


def pmf_from_rates(rates: np.ndarray) -> np.ndarray:
    """Inverse of :func:`failure_rates`: ``p(d) = r(d) prod_{k<d} (1 - r(k))``."""
    rates = np.asarray(rates, dtype=float)
    survive = np.concatenate(([1.0], np.cumprod(1.0 - rates)[:-1]))
    return rates * survive


@dataclass(frozen=True)
class DiseaseParams:
    """Biological and contact parameters of one population.

    ``durations`` maps each phase in :data:`PHASES` to its duration law.
    ``alpha_i`` is the daily number of new exposures caused by one I1/I2
    individual, ``alpha_a`` the same for P/A individuals.
    """

    durations: Mapping[str, PhaseDurationDist]
    p_i: float
    p_h: float
    p_d: float = 0.0
    alpha_i: float = 0.0
    alpha_a: float = 0.0
    h: int = DEFAULT_HORIZON
    _rates: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.h < 1:
            raise ValueError("h must be positive")
        missing = set(PHASES) - set(self.durations)
        if missing:
            raise ValueError(f"missing duration laws for {sorted(missing)}")
        durations = {}
        for phase in PHASES:
            dist = self.durations[phase]
            if dist.phase != phase:
                raise ValueError(f"duration law for {phase} is labelled {dist.phase}")
            durations[phase] = dist.padded(self.h)
        object.__setattr__(self, "durations", durations)
        for name in ("p_i", "p_h", "p_d"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.alpha_i < 0 or self.alpha_a < 0:
            raise ValueError("contact rates must be nonnegative")
        object.__setattr__(self, "_rates", {p: failure_rates(d) for p, d in durations.items()})

    def rates(self, phase: str) -> np.ndarray:
        return self._rates[phase]

    @property
    def dim(self) -> int:
        return state_dim(self.h)

    def with_rates(self, alpha_i: float, alpha_a: float | None = None) -> "DiseaseParams":
        """Copy with new contact rates (``alpha_a`` defaults to ``alpha_i``)."""
        return replace(self, alpha_i=alpha_i, alpha_a=alpha_i if alpha_a is None else alpha_a)

    def to_dict(self) -> dict:
        durations = {}
        for phase, dist in self.durations.items():
            n = dist.max_duration
            durations[phase] = [float(v) for v in dist.pmf[:n]]
        return {
            "durations": durations,
            "p_i": self.p_i,
            "p_h": self.p_h,
            "p_d": self.p_d,
            "alpha_i": self.alpha_i,
            "alpha_a": self.alpha_a,
            "h": self.h,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DiseaseParams":
        h = int(data.get("h", DEFAULT_HORIZON))
        durations = {}
        for phase in PHASES:
            pmf = np.asarray(data["durations"][phase], dtype=float)
            if pmf.size > h:
                if np.any(pmf[h:] > 0):
                    raise ValueError(f"duration law for {phase} exceeds horizon h={h}")
                pmf = pmf[:h]
            durations[phase] = PhaseDurationDist(phase, np.pad(pmf, (0, h - pmf.size)))
        return cls(
            durations=durations,
            p_i=float(data["p_i"]),
            p_h=float(data["p_h"]),
            p_d=float(data.get("p_d", 0.0)),
            alpha_i=float(data.get("alpha_i", 0.0)),
            alpha_a=float(data.get("alpha_a", 0.0)),
            h=h,
        )


def baseline_params(h: int = DEFAULT_HORIZON, alpha_i: float = 0.4, alpha_a: float = 0.3,
                    p_d: float = 0.0) -> DiseaseParams:
    """Baseline durations and branch probabilities.

    E uniform on {3,4,5}, P uniform on {1,2}, I1 uniform on {5,6,7}, I2 lasts
    4 days, A lasts 11 days; p_i = 0.7, p_h = 0.05. The default contact rates
    (0.4 symptomatic, 0.3 otherwise) are those of the mean-field vs stochastic
    comparison run with 200 initial exposed.
    """
    third = 1.0 / 3.0
    durations = {
        "E": PhaseDurationDist.from_support("E", {3: third, 4: third, 5: third}, h),
        "P": PhaseDurationDist.from_support("P", {1: 0.5, 2: 0.5}, h),
        "I1": PhaseDurationDist.from_support("I1", {5: third, 6: third, 7: third}, h),
        "I2": PhaseDurationDist.from_support("I2", {4: 1.0}, h),
        "A": PhaseDurationDist.from_support("A", {11: 1.0}, h),
    }
    return DiseaseParams(durations, p_i=0.7, p_h=0.05, p_d=p_d,
                         alpha_i=alpha_i, alpha_a=alpha_a, h=h)


def state_dim(h: int) -> int:
    return 5 * h + 1


def state_index(phase: str, day: int | None, h: int) -> int:
    """Position of ``(phase, day)`` in the state vector; ``H`` ignores ``day``."""
    if phase == "H":
        return 5 * h
    try:
        block = PHASES.index(phase)
    except ValueError:
        raise ValueError(f"unknown phase {phase!r}") from None
    if day is None or not 1 <= day <= h:
        raise ValueError(f"day {day} outside 1..{h}")
    return block * h + day - 1


def index_to_state(index: int, h: int) -> tuple[str, int | None]:
    """Inverse of :func:`state_index`."""
    if index == 5 * h:
        return ("H", None)
    if not 0 <= index < 5 * h:
        raise ValueError(f"index {index} outside 0..{5 * h}")
    block, d = divmod(index, h)
    return (PHASES[block], d + 1)


def block(phase: str, h: int) -> slice:
    """Slice of the state vector holding ``x_phase[1..h]``."""
    if phase == "H":
        return slice(5 * h, 5 * h + 1)
    b = PHASES.index(phase)
    return slice(b * h, (b + 1) * h)


def new_state(h: int, entries: Mapping[tuple[str, int | None], float] | None = None,
              dtype=float) -> np.ndarray:
    """Zero state vector with optional ``{(phase, day): value}`` entries."""
    x = np.zeros(state_dim(h), dtype=dtype)
    for (phase, day), v in (entries or {}).items():
        x[state_index(phase, day, h)] = v
    return validate_state(x, h)


def phase_totals(x: np.ndarray, h: int) -> dict[str, np.ndarray]:
    """Sum over days of each phase block; works on trailing-axis batches."""
    x = np.asarray(x)
    out = {p: x[..., block(p, h)].sum(axis=-1) for p in PHASES}
    out["H"] = x[..., 5 * h]
    return out


def validate_state(x: np.ndarray, h: int) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != state_dim(h):
        raise ValueError(f"state has length {x.shape[-1]}, expected {state_dim(h)}")
    if np.any(x < 0):
        raise ValueError("state entries must be nonnegative")
    return x


@dataclass(frozen=True)
class DeathImmunCounters:
    deaths: float
    immunized: float

    def __post_init__(self):
        if self.deaths < 0 or self.immunized < 0:
            raise ValueError("counters must be nonnegative")


def death_immun_update(x_H: float, x_A: Sequence[float], x_I2: Sequence[float],
                       params: DiseaseParams) -> DeathImmunCounters:
    """Deaths and immunizations on day t+1 from the day-t slices of the state.

    Only hospitalized cases die, with probability ``p_d``; everyone else
    leaving A or I2 is immunized. Delay between admission and death is
    ignored.
    """
    x_A = np.asarray(x_A, dtype=float)
    x_I2 = np.asarray(x_I2, dtype=float)
    recovered = float(x_A @ params.rates("A") + x_I2 @ params.rates("I2"))
    return DeathImmunCounters(
        deaths=params.p_d * x_H,
        immunized=(1.0 - params.p_d) * x_H + recovered,
    )


@dataclass(frozen=True)
class RateSchedule:
    """Day-indexed contact rates; entry ``t`` drives the step from t to t+1."""

    alpha_i: np.ndarray
    alpha_a: np.ndarray

    def __post_init__(self):
        ai = np.array(self.alpha_i, dtype=float)
        aa = np.array(self.alpha_a, dtype=float)
        if ai.shape != aa.shape or ai.ndim != 1:
            raise ValueError("alpha_i and alpha_a must be 1-D of equal length")
        if np.any(ai < 0) or np.any(aa < 0):
            raise ValueError("contact rates must be nonnegative")
        ai.setflags(write=False)
        aa.setflags(write=False)
        object.__setattr__(self, "alpha_i", ai)
        object.__setattr__(self, "alpha_a", aa)

    def __len__(self) -> int:
        return self.alpha_i.size

    def at(self, t: int) -> tuple[float, float]:
        return float(self.alpha_i[t]), float(self.alpha_a[t])

    @classmethod
    def constant(cls, alpha_i: float, alpha_a: float, T: int) -> "RateSchedule":
        return cls(np.full(T, float(alpha_i)), np.full(T, float(alpha_a)))

    @classmethod
    def piecewise(cls, rates: Sequence[float], breakpoints: Sequence[int], T: int,
                  rates_a: Sequence[float] | None = None) -> "RateSchedule":
        """Piecewise-constant rates: ``rates[k]`` applies on ``[b_k, b_{k+1})`` with b_0 = 0."""
        phase = phase_of_day(breakpoints, T)
        ai = np.asarray(rates, dtype=float)[phase]
        aa = ai if rates_a is None else np.asarray(rates_a, dtype=float)[phase]
        return cls(ai, aa)


def phase_of_day(breakpoints: Sequence[int], T: int) -> np.ndarray:
    """Phase label (0-based) of each day 0..T-1 given increasing breakpoints."""
    bp = list(breakpoints)
    if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
        raise ValueError("breakpoints must be strictly increasing")
    return np.searchsorted(np.asarray(bp, dtype=int), np.arange(T), side="right")
