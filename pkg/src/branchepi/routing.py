"""Several interacting cohorts with daily migration between them (mean field).

Each day runs in two stages. First every cohort ages and branches on its
own, with new exposures fed by the infectious members of all cohorts it
meets. Then individuals move between cohorts according to a routing matrix
``R``, where ``R[c', c]`` is the fraction of cohort ``c'`` found in cohort
``c`` the next day. Hospitalized individuals do not move.

Routing fractions are rarely observed directly. :func:`maxent_routing`
recovers the least committal ``R`` consistent with aggregate region-to-region
flows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .core import DiseaseParams, block, state_index
from .meanfield import transition_parts

RECIPROCITY_RTOL = 1e-9
ROW_TOL = 1e-12


@dataclass(frozen=True)
class Cohort:
    """A sub-population, e.g. ``(region, previous-night region, age)``."""

    id: Hashable
    N: float

    def __post_init__(self):
        if self.N < 0:
            raise ValueError(f"cohort {self.id} has negative size")


def reciprocity_violations(n: np.ndarray, N: np.ndarray, rtol: float = RECIPROCITY_RTOL):
    """Pairs ``(c, c')`` where ``N_c n[c, c'] != N_c' n[c', c]`` beyond ``rtol``."""
    n = np.asarray(n, dtype=float)
    N = np.asarray(N, dtype=float)
    flow = N[:, None] * n
    diff = np.abs(flow - flow.T)
    scale = np.maximum(np.abs(flow), np.abs(flow.T))
    bad = np.argwhere(np.triu(diff > rtol * np.maximum(scale, 1e-300), 1))
    return [(int(i), int(j)) for i, j in bad]


def infection_rate_matrix(q, n, N, rtol: float = RECIPROCITY_RTOL) -> np.ndarray:
    """Entrywise ``alpha = q * n`` after checking that encounters are reciprocal."""
    n = np.atleast_2d(np.asarray(n, dtype=float))
    q = np.broadcast_to(np.asarray(q, dtype=float), n.shape)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("transmission probabilities must lie in [0, 1]")
    if np.any(n < 0):
        raise ValueError("contact intensities must be nonnegative")
    bad = reciprocity_violations(n, N, rtol)
    if bad:
        raise ValueError(f"contact intensities are not reciprocal for cohort pairs {bad}")
    return q * n


@dataclass(frozen=True)
class ContactIntensity:
    """Encounter rates split by setting; the total must be reciprocal."""

    N: np.ndarray
    parts: Mapping[str, np.ndarray]

    def __post_init__(self):
        for name, n in self.parts.items():
            bad = reciprocity_violations(n, self.N)
            if bad:
                raise ValueError(f"{name} contacts are not reciprocal for cohort pairs {bad}")

    @property
    def total(self) -> np.ndarray:
        return sum(np.asarray(v, dtype=float) for v in self.parts.values())

    def alpha(self, q) -> np.ndarray:
        return infection_rate_matrix(q, self.total, self.N)


def contact_decomposition(N, home=None, work=None, school=None, transit=None) -> ContactIntensity:
    """Home, work, school and transit encounters (omitted settings count as zero)."""
    parts = {k: np.asarray(v, dtype=float) for k, v in
             (("home", home), ("work", work), ("school", school), ("transit", transit))
             if v is not None}
    return ContactIntensity(np.asarray(N, dtype=float), parts)


def normalize_beta(beta: Sequence[float]) -> tuple[np.ndarray, float]:
    """Rescale location weights to mean 1; returns the weights and the factor removed.

    Dividing ``beta`` by ``eta`` and multiplying the transmission
    probabilities by ``eta`` leaves every infection rate unchanged.
    """
    b = np.asarray(beta, dtype=float)
    eta = float(b.mean())
    if eta <= 0:
        raise ValueError("location weights must have a positive mean")
    return b / eta, eta


def transit_contacts(n_cz, beta, N) -> np.ndarray:
    """``n_T[c, c'] = sum_z beta_z n[c, z] n[c', z] / N_c``, reciprocal by construction."""
    v = np.atleast_2d(np.asarray(n_cz, dtype=float))
    b = np.asarray(beta, dtype=float)
    N = np.asarray(N, dtype=float)
    if v.shape != (N.size, b.size):
        raise ValueError(f"visits have shape {v.shape}, expected {(N.size, b.size)}")
    empty = N <= 0
    if np.any(v[empty] != 0):
        raise ValueError(f"cohorts {np.flatnonzero(empty & (v != 0).any(axis=1)).tolist()} "
                         "have no population but record visits")
    pair = (v * b) @ v.T
    out = np.zeros_like(pair)
    out[~empty] = pair[~empty] / N[~empty, None]
    return out


@dataclass
class CohortSystem:
    """Mean-field state of every cohort plus what drives its next day.

    ``alpha``, ``routing`` and ``arrivals`` may be fixed arrays or callables
    of the day index. ``alpha[c', c]`` is the number of new cohort-``c``
    exposures per infectious member of cohort ``c'``; one rate covers both
    the asymptomatic and symptomatic phases. Arrivals only change the
    population sizes unless ``arrival_states`` supplies their compartments.
    """

    cohorts: list
    params: list
    states: np.ndarray
    N: np.ndarray
    alpha: np.ndarray | Callable
    routing: np.ndarray | Callable
    arrivals: np.ndarray | Callable | None = None
    arrival_states: Callable | None = None
    _parts: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        n = len(self.cohorts)
        if isinstance(self.params, DiseaseParams):
            self.params = [self.params] * n
        if len(self.params) != n:
            raise ValueError("one DiseaseParams per cohort is required")
        hs = {p.h for p in self.params}
        if len(hs) != 1:
            raise ValueError("all cohorts must share the same horizon h")
        self.h = hs.pop()
        self.states = np.array(self.states, dtype=float).reshape(n, 5 * self.h + 1)
        if np.any(self.states < 0):
            raise ValueError("cohort states must be nonnegative")
        self.N = np.asarray(self.N, dtype=float)
        cache = {}
        self._parts = [cache.setdefault(id(p), transition_parts(p)) for p in self.params]

    @property
    def size(self) -> int:
        return len(self.cohorts)

    def alpha_at(self, t: int) -> np.ndarray:
        a = self.alpha(t) if callable(self.alpha) else self.alpha
        return np.broadcast_to(np.asarray(a, dtype=float), (self.size, self.size))

    def routing_at(self, t: int) -> np.ndarray:
        R = self.routing(t) if callable(self.routing) else self.routing
        return np.asarray(R, dtype=float)

    def arrivals_at(self, t: int) -> np.ndarray:
        if self.arrivals is None:
            return np.zeros(self.size)
        a = self.arrivals(t) if callable(self.arrivals) else self.arrivals
        return np.broadcast_to(np.asarray(a, dtype=float), (self.size,))


def _infectious(X: np.ndarray, h: int) -> np.ndarray:
    return sum(X[:, block(p, h)].sum(axis=1) for p in ("P", "I1", "A", "I2"))


def epidemic_stage(system: CohortSystem, t: int, X: np.ndarray | None = None) -> np.ndarray:
    """Within-cohort aging and branching plus cross-cohort exposures.

    A cohort's own infectious members act through its transition matrix
    with both rates set to ``alpha[c, c]``, so a single cohort reproduces
    the one-population step exactly.
    """
    X = system.states if X is None else X
    alpha = system.alpha_at(t)
    inf = _infectious(X, system.h)
    Y = np.empty_like(X)
    e1 = state_index("E", 1, system.h)
    for c, (M0, Mi, Ma) in enumerate(system._parts):
        a = alpha[c, c]
        Y[c] = (M0 + a * Mi + a * Ma) @ X[c]
    between = np.array(alpha)
    np.fill_diagonal(between, 0.0)
    Y[:, e1] += between.T @ inf
    return Y


def routing_stage(Y: np.ndarray, R: np.ndarray, N: np.ndarray,
                  arrivals: np.ndarray | None = None,
                  arrival_states: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Move the E..I2 compartments by ``R``; returns next states and population sizes."""
    R = np.asarray(R, dtype=float)
    n = Y.shape[0]
    if R.shape != (n, n):
        raise ValueError(f"routing matrix has shape {R.shape}, expected {(n, n)}")
    if np.any(R < 0):
        raise ValueError("routing fractions must be nonnegative")
    rows = R.sum(axis=1)
    if np.any(rows > 1 + ROW_TOL):
        raise ValueError(f"routing rows {np.flatnonzero(rows > 1 + ROW_TOL).tolist()} sum above 1")
    ih = Y.shape[1] - 1
    X = np.empty_like(Y)
    X[:, :ih] = R.T @ Y[:, :ih]
    X[:, ih] = Y[:, ih]
    if arrival_states is not None:
        X += arrival_states
    N_next = R.T @ np.asarray(N, dtype=float)
    if arrivals is not None:
        N_next = N_next + arrivals
    return X, N_next


@dataclass(frozen=True)
class CohortTrajectory:
    states: np.ndarray  # (T+1, n_cohorts, dim)
    N: np.ndarray  # (T+1, n_cohorts)
    h: int

    @property
    def x_H(self) -> np.ndarray:
        return self.states[..., -1]


def simulate_cohorts(system: CohortSystem, T: int) -> CohortTrajectory:
    """Alternate the two stages for ``T`` days, starting from ``system.states``."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    n, dim = system.states.shape
    states = np.empty((T + 1, n, dim))
    Ns = np.empty((T + 1, n))
    states[0], Ns[0] = system.states, system.N
    for t in range(T):
        Y = epidemic_stage(system, t, states[t])
        extra = system.arrival_states(t + 1) if system.arrival_states is not None else None
        states[t + 1], Ns[t + 1] = routing_stage(Y, system.routing_at(t), Ns[t],
                                                 system.arrivals_at(t + 1), extra)
    return CohortTrajectory(states, Ns, system.h)


# ---------------------------------------------------------------------------
# maximum-entropy routing estimate


@dataclass(frozen=True)
class RoutingEstimate:
    R: np.ndarray
    cohorts: list
    flow_residual: float
    row_excess: float
    iterations: int
    objective: float

    def as_dict(self) -> dict:
        return {(self.cohorts[i], self.cohorts[j]): float(self.R[i, j])
                for i, j in zip(*np.nonzero(self.R))}


def entropy(R: np.ndarray) -> float:
    """``sum R ln(1/R)`` with ``0 ln(1/0) = 0``."""
    R = np.asarray(R, dtype=float)
    pos = R > 0
    return float(-(R[pos] * np.log(R[pos])).sum())


def _solve_log_sum(logw: np.ndarray, x: np.ndarray, target: float, lam: float) -> float:
    """Root in ``lam`` of ``sum exp(logw + lam x) = target`` (``x > 0``), by safeguarded Newton."""
    log_target = np.log(target)

    def F(l):
        z = logw + l * x
        m = z.max()
        s = np.exp(z - m)
        tot = s.sum()
        return m + np.log(tot) - log_target, (s * x).sum() / tot

    lo, hi = -np.inf, np.inf
    for _ in range(200):
        f, df = F(lam)
        if abs(f) < 1e-15:
            break
        if f > 0:
            hi = min(hi, lam)
        else:
            lo = max(lo, lam)
        step = lam - f / df
        if not (lo < step < hi):
            if np.isfinite(lo) and np.isfinite(hi):
                step = 0.5 * (lo + hi)
            else:
                step = lam - np.sign(f) * max(1.0, abs(f / df)) * 2
        if step == lam:
            break
        lam = step
    return lam


def maxent_routing(cohorts: Sequence[tuple], N: Sequence[float],
                   flows: Mapping[tuple, float], tol: float = 1e-9,
                   max_iter: int = 100_000) -> RoutingEstimate:
    """Maximum-entropy routing fractions matching observed region-to-region flows.

    ``cohorts`` are ``(region, previous-night region, age)`` triples and
    ``flows[(r1, r2, a)]`` the number of age-``a`` individuals who slept in
    ``r1`` and then in ``r2``. ``tol`` bounds the absolute flow mismatch,
    the row-sum excess and the complementary slackness. The unknown ``R[c, c']`` is free only when
    ``c`` slept in ``r1``, ``c'`` sleeps in ``r2`` and both share the age
    band; a flow left out of ``flows`` is taken as zero.

    Solved by coordinate descent on the dual: each row multiplier has a
    closed form and each flow multiplier is a one-dimensional root. The
    primal iterate ``R = exp(-1 - mu_c + lambda_g N_c)`` stays positive.
    """
    cohorts = [tuple(c) for c in cohorts]
    N = np.asarray(N, dtype=float)
    n = len(cohorts)
    if N.shape != (n,):
        raise ValueError("one population size per cohort is required")
    if np.any(N < 0):
        raise ValueError("population sizes must be nonnegative")
    for key, d in flows.items():
        if d < 0:
            raise ValueError(f"flow {key} is negative")

    # each flow constraint owns a block of (row cohort, destination cohort) entries
    regions = {(c[1], c[2]) for c in cohorts}
    for (r1, r2, a) in flows:
        if flows[(r1, r2, a)] > 0 and ((r1, a) not in regions or (r2, a) not in regions):
            raise ValueError(f"flow {(r1, r2, a)} has no matching source or destination cohort")
    for (r1, a) in regions:
        out = sum(v for (s, _, b), v in flows.items() if s == r1 and b == a)
        cap = N[[i for i, c in enumerate(cohorts) if c[1] == r1 and c[2] == a]].sum()
        if out > cap * (1 + 1e-12):
            raise ValueError(f"infeasible: flows out of {r1} (age {a}) total {out:g} "
                             f"but only {cap:g} individuals slept there")

    scale = max(N.max(initial=0.0), 1.0)
    Ns = N / scale
    groups = []
    for (r1, r2, a), d in sorted(flows.items(), key=lambda kv: repr(kv[0])):
        rows = [i for i, c in enumerate(cohorts) if c[1] == r1 and c[2] == a and N[i] > 0]
        cols = [j for j, c in enumerate(cohorts) if c[1] == r2 and c[2] == a]
        if d <= 0 or not rows or not cols:
            if d > 0:
                raise ValueError(f"flow {(r1, r2, a)} cannot be carried by any cohort")
            continue
        ii, jj = np.meshgrid(rows, cols, indexing="ij")
        groups.append({"key": (r1, r2, a), "i": ii.ravel(), "j": jj.ravel(),
                       "target": d / scale, "lam": 0.0})

    mu = np.zeros(n)
    R = np.zeros((n, n))

    def fill():
        R[:] = 0.0
        for g in groups:
            R[g["i"], g["j"]] = np.exp(-1.0 - mu[g["i"]] + g["lam"] * Ns[g["i"]])

    def residuals():
        flow_res = max((abs((Ns[g["i"]] * R[g["i"], g["j"]]).sum() - g["target"])
                        for g in groups), default=0.0)
        rows = R.sum(axis=1)
        row_excess = max(0.0, float((rows - 1).max(initial=0.0)))
        slack = float(np.abs(mu * (1 - rows)).max(initial=0.0))
        return flow_res, row_excess, slack

    it = 0
    for it in range(1, max_iter + 1):
        for g in groups:
            i = g["i"]
            g["lam"] = _solve_log_sum(np.log(Ns[i]) - 1.0 - mu[i], Ns[i], g["target"], g["lam"])
        # row multipliers: closed form given the flow multipliers
        log_row = np.full(n, -np.inf)
        for g in groups:
            z = -1.0 + g["lam"] * Ns[g["i"]]
            np.logaddexp.at(log_row, g["i"], z)
        mu = np.maximum(0.0, np.where(np.isfinite(log_row), log_row, 0.0))
        fill()
        flow_res, row_excess, slack = residuals()
        if max(flow_res * scale, row_excess, slack) <= tol:
            break
    else:
        raise RuntimeError(f"maxent routing did not converge in {max_iter} sweeps "
                           f"(flow residual {flow_res:.3g}, row excess {row_excess:.3g})")
    R[R < 1e-300] = 0.0
    return RoutingEstimate(R, cohorts, flow_res * scale, row_excess, it, entropy(R))
