"""Contact rates modulated by a normalized daily outflow covariate.

Each lockdown phase has its own base rate; on top of that, ``f(t)`` measures
how far the day's commuting flow sits from its usual level, in standard
deviations. ``f = 0`` gives back the base rate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import RateSchedule

FORMS = ("linear", "logistic", "custom")


@dataclass(frozen=True)
class OutflowSeries:
    """Raw daily outflow and its standardized version ``f``.

    ``mean`` and ``std`` are the statistics used for standardizing, so that
    later days can be put on the same scale.
    """

    raw: np.ndarray
    f: np.ndarray
    mean: float
    std: float

    def extend(self, raw_more: Sequence[float]) -> "OutflowSeries":
        """Append days standardized with the stored statistics (no refit)."""
        more = np.asarray(raw_more, dtype=float)
        return OutflowSeries(np.concatenate([self.raw, more]),
                             np.concatenate([self.f, (more - self.mean) / self.std]),
                             self.mean, self.std)


def normalize_flow(raw: Sequence[float], window: slice | int | None = None,
                   smooth_window: int | None = None) -> OutflowSeries:
    """Zero-mean, unit population-std version of ``raw``.

    ``window`` (a slice, or the number of leading days) selects the days the
    mean and std are computed on; every day is then standardized with them.
    ``smooth_window`` applies a trailing moving average first.
    """
    x = np.asarray(raw, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("outflow series needs at least two days")
    if smooth_window is not None and smooth_window > 1:
        x = _trailing_mean(x, smooth_window)
    ref = x if window is None else x[window if isinstance(window, slice) else slice(0, int(window))]
    if ref.size < 2:
        raise ValueError("normalization window needs at least two days")
    mu = float(ref.mean())
    sd = float(ref.std())
    if sd <= 1e-12 * max(1.0, abs(mu)):
        raise ValueError("outflow series is constant; cannot standardize")
    return OutflowSeries(np.asarray(raw, dtype=float), (x - mu) / sd, mu, sd)


def _trailing_mean(x: np.ndarray, k: int) -> np.ndarray:
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    n = np.arange(1, x.size + 1)
    lo = np.maximum(n - k, 0)
    out[:] = (c[n] - c[lo]) / (n - lo)
    return out


@dataclass(frozen=True)
class MobilityRateSpec:
    """Per-phase base rates and the sensitivity of each rate to the flow.

    ``form`` is ``linear`` (``base * (1 + gamma f)``), ``logistic``
    (``base * 2 / (1 + exp(-gamma f))``) or ``custom`` with ``rate_fn``
    mapping ``(base, gamma, f)`` to a rate.
    """

    base_i: tuple
    base_a: tuple
    gamma_i: float = 0.0
    gamma_a: float = 0.0
    form: str = "linear"
    rate_fn: Callable | None = None

    def __post_init__(self):
        bi = tuple(float(v) for v in np.atleast_1d(self.base_i))
        ba = tuple(float(v) for v in np.atleast_1d(self.base_a))
        if len(bi) != len(ba):
            raise ValueError("base_i and base_a need one entry per phase")
        if min(bi + ba) < 0:
            raise ValueError("base rates must be nonnegative")
        if self.gamma_i < 0 or self.gamma_a < 0:
            raise ValueError("sensitivities must be nonnegative")
        if self.form not in FORMS:
            raise ValueError(f"unknown rate form {self.form!r}")
        if self.form == "custom" and self.rate_fn is None:
            raise ValueError("custom form needs rate_fn")
        object.__setattr__(self, "base_i", bi)
        object.__setattr__(self, "base_a", ba)

    def check_range(self, f: np.ndarray) -> None:
        """Reject a linear spec that would go negative somewhere on ``f``."""
        if self.form != "linear" or np.size(f) == 0:
            return
        lo = float(np.min(f))
        for name, gamma in (("gamma_i", self.gamma_i), ("gamma_a", self.gamma_a)):
            if 1 + gamma * lo < 0:
                raise ValueError(f"linear rate turns negative: 1 + {name}*min(f) = {1 + gamma * lo:.4g}")

    def apply(self, base: np.ndarray, gamma: float, f: np.ndarray) -> np.ndarray:
        if self.form == "linear":
            return base * (1.0 + gamma * f)
        if self.form == "logistic":
            return base * 2.0 / (1.0 + np.exp(-gamma * f))
        return np.asarray(self.rate_fn(base, gamma, f), dtype=float)


def contact_rate_series(spec: MobilityRateSpec, phase_of_day: Sequence[int],
                        f: OutflowSeries | Sequence[float]) -> RateSchedule:
    """Daily ``(alpha_i, alpha_a)`` from the phase labels and the flow covariate."""
    fv = f.f if isinstance(f, OutflowSeries) else np.asarray(f, dtype=float)
    phase = np.asarray(phase_of_day, dtype=int)
    if phase.size > fv.size:
        raise ValueError(f"flow covers {fv.size} days, schedule needs {phase.size}")
    if phase.size and (phase.min() < 0 or phase.max() >= len(spec.base_i)):
        raise ValueError("phase label without a base rate")
    fv = fv[:phase.size]
    spec.check_range(fv)
    ai = spec.apply(np.asarray(spec.base_i)[phase], spec.gamma_i, fv)
    aa = spec.apply(np.asarray(spec.base_a)[phase], spec.gamma_a, fv)
    if np.any(ai < 0) or np.any(aa < 0):
        raise ValueError("contact-rate series has negative entries")
    return RateSchedule(ai, aa)
