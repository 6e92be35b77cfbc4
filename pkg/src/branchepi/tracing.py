"""Contact tracing and case isolation on an extended type space.

An individual's type is ``(path, d)``: ``path`` lists the phase it will be
in on each remaining day and ``d`` is the number of days until it is tested
positive (today counts as day 1, ``inf`` means never). A positive test
isolates the individual, so its path never extends past day ``d``.

A child born to a parent whose test is ``d`` days away (counted from the
child's birth day, so 0 means the parent was tested the day before) gets

    d' = min(d_1, X)          if untraced (probability 1 - p_t)
    d' = min(d_1, X, d + 1)   if traced   (probability p_t)

where ``d_1`` is the first day its own path reaches an auto-test phase and
``X`` is a geometric random-test day, censored to ``inf`` past ``D_max``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import DiseaseParams
from .meanfield import spectral_radius

INF = math.inf
PATH_CAP = 10_000

# infectivity class per phase: "-" none, "a" rate alpha_a, "i" rate alpha_i
PHASE_CLASS = {"E": "-", "H": "-", "P": "a", "A": "a", "I1": "i", "I2": "i"}


@dataclass(frozen=True)
class PhasePath:
    phases: tuple[str, ...]
    probability: float


@dataclass(frozen=True)
class ExtendedType:
    phases: tuple[str, ...]
    days_until_test: float = INF

    def __post_init__(self):
        d = self.days_until_test
        if d != INF and (d < 0 or d != int(d)):
            raise ValueError(f"days_until_test must be a nonnegative integer or inf, got {d}")
        if d != INF and len(self.phases) > max(d, 0):
            raise ValueError("path extends past the test day")


@dataclass(frozen=True)
class TracingConfig:
    p_t: float = 0.0
    epsilon: float = 0.0
    D_max: int | None = None
    phi0: frozenset = field(default_factory=lambda: frozenset({"H"}))

    def __post_init__(self):
        if not 0.0 <= self.p_t <= 1.0:
            raise ValueError(f"p_t={self.p_t} outside [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon={self.epsilon} outside [0, 1]")
        if self.D_max is not None and self.D_max < 1:
            raise ValueError("D_max must be positive")
        object.__setattr__(self, "phi0", frozenset(self.phi0))

    def horizon(self, paths: Sequence[PhasePath]) -> int:
        longest = max(len(p.phases) for p in paths)
        if self.D_max is None:
            return longest
        if self.D_max < longest:
            raise ValueError(f"D_max={self.D_max} shorter than the longest path ({longest})")
        return self.D_max


def enumerate_paths(params: DiseaseParams, cap: int = PATH_CAP) -> list[PhasePath]:
    """Every phase sequence an exposed individual can follow, with its probability.

    Branches with zero probability are dropped. Paths through I1 then H end
    on the single admission day.
    """
    def support(phase):
        dist = params.durations[phase]
        return [(int(d), float(dist.pmf[d - 1])) for d in dist.support]

    E, P, I1, I2, A = (support(p) for p in ("E", "P", "I1", "I2", "A"))
    tails = []
    if params.p_i < 1:
        tails += [(("A",) * dA, (1 - params.p_i) * pA) for dA, pA in A]
    if params.p_i > 0:
        for d1, p1 in I1:
            head = ("I1",) * d1
            w = params.p_i * p1
            if params.p_h > 0:
                tails.append((head + ("H",), w * params.p_h))
            if params.p_h < 1:
                tails += [(head + ("I2",) * d2, w * (1 - params.p_h) * p2) for d2, p2 in I2]
    count = len(E) * len(P) * len(tails)
    if count > cap:
        raise ValueError(f"{count} paths exceed the cap of {cap}")
    paths = []
    for (dE, pE), (dP, pP), (tail, pt) in itertools.product(E, P, tails):
        paths.append(PhasePath(("E",) * dE + ("P",) * dP + tail, pE * pP * pt))
    return paths


def first_test_day(phases: Sequence[str], phi0: Iterable[str]) -> float:
    """1-based index of the first phase in ``phi0`` (``inf`` if none)."""
    phi0 = set(phi0)
    for k, ph in enumerate(phases, start=1):
        if ph in phi0:
            return k
    return INF


def _random_test_day(epsilon: float, D_max: int, rng: np.random.Generator) -> float:
    if epsilon <= 0:
        return INF
    g = int(rng.geometric(epsilon))
    return g if g <= D_max else INF


def sample_child_type(parent: ExtendedType, config: TracingConfig, params: DiseaseParams,
                      rng: np.random.Generator,
                      paths: Sequence[PhasePath] | None = None) -> ExtendedType:
    """Draw the type of a child born today to ``parent`` (its type on the same day)."""
    paths = enumerate_paths(params) if paths is None else paths
    D_max = config.horizon(paths)
    k = rng.choice(len(paths), p=np.array([p.probability for p in paths]))
    full = paths[k].phases
    d1 = first_test_day(full, config.phi0)
    x = _random_test_day(config.epsilon, D_max, rng)
    d = min(d1, x)
    if rng.random() < config.p_t:
        d = min(d, parent.days_until_test + 1)
    phases = full if d == INF else full[:int(d)]
    return ExtendedType(phases, d)


def type_key(t: ExtendedType) -> tuple[str, float]:
    """Matrix index key: the infectivity class of each remaining day, plus ``d``.

    Phases with equal infectivity are interchangeable for everything that
    follows, and ``d`` no longer matters once no infectious day remains, so
    both are collapsed.
    """
    classes = "".join(PHASE_CLASS[p] for p in t.phases)
    return _canon(classes, t.days_until_test)


def _canon(classes: str, d: float) -> tuple[str, float]:
    if "a" not in classes and "i" not in classes:
        d = INF
    return classes, d


def _test_day_law(epsilon: float, p_t: float, d_birth: float, D_max: int) -> dict[float, float]:
    """Law of ``min(X, T)`` where ``T = d_birth + 1`` if traced, ``inf`` otherwise."""
    k = np.arange(1, D_max + 1)
    px = epsilon * (1 - epsilon) ** (k - 1) if epsilon > 0 else np.zeros(D_max)
    p_inf = 1.0 - px.sum() if epsilon > 0 else 1.0
    law: dict[float, float] = {}
    if d_birth == INF:
        for kk, p in zip(k, px):
            law[int(kk)] = float(p)
        law[INF] = p_inf
        return law
    cut = int(d_birth) + 1
    for kk, p in zip(k, px):
        if kk < cut:
            law[int(kk)] = float(p)
        elif kk > cut:
            law[int(kk)] = (1 - p_t) * float(p)
    tail = float(px[cut - 1:].sum()) + p_inf if cut <= D_max else p_inf
    at_cut = float(px[cut - 1]) if cut <= D_max else 0.0
    law[cut] = law.get(cut, 0.0) + at_cut + p_t * (tail - at_cut)
    law[INF] = (1 - p_t) * p_inf
    return {d: p for d, p in law.items() if p > 0}


def newborn_law(paths: Sequence[PhasePath], config: TracingConfig, d_birth: float,
                D_max: int) -> dict[tuple[str, float], float]:
    """Distribution of child keys for a parent ``d_birth`` days from its test."""
    law: dict[tuple[str, float], float] = {}
    test = _test_day_law(config.epsilon, config.p_t, d_birth, D_max)
    for path in paths:
        d1 = first_test_day(path.phases, config.phi0)
        classes = "".join(PHASE_CLASS[p] for p in path.phases)
        for y, py in test.items():
            d = min(d1, y)
            cls = classes if d == INF else classes[:int(d)]
            key = _canon(cls, d)
            law[key] = law.get(key, 0.0) + path.probability * py
    return law


@dataclass(frozen=True)
class TracingMatrix:
    """Mean one-day progeny matrix over extended types.

    ``matrix[i, j]`` is the expected number of type-``i`` individuals
    tomorrow per type-``j`` individual today (its own aged self included).
    ``initial`` is the type law of an untraced index case.
    """

    matrix: sp.csr_matrix
    types: list
    index: dict
    initial: np.ndarray
    births: np.ndarray
    config: TracingConfig
    D_max: int

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other

    def spectral_radius(self) -> float:
        return spectral_radius(self.matrix)[0]


def _aged(key):
    classes, d = key
    if len(classes) <= 1:
        return None
    return _canon(classes[1:], d - 1)


def tracing_progeny_matrix(config: TracingConfig, params: DiseaseParams,
                           cap: int = PATH_CAP, type_cap: int = 200_000) -> TracingMatrix:
    """Assemble the extended-type mean progeny matrix (scipy CSR)."""
    paths = enumerate_paths(params, cap)
    D_max = config.horizon(paths)
    rate = {"-": 0.0, "a": params.alpha_a, "i": params.alpha_i}

    laws: dict[float, dict] = {}

    def law(d_birth):
        if d_birth not in laws:
            laws[d_birth] = newborn_law(paths, config, d_birth, D_max)
        return laws[d_birth]

    # reachable types: newborns for every possible parental d, closed under aging
    seen: dict[tuple[str, float], int] = {}
    frontier = []
    for d_birth in list(range(0, D_max)) + [INF]:
        for key in law(d_birth):
            if key not in seen:
                seen[key] = len(seen)
                frontier.append(key)
    while frontier:
        key = frontier.pop()
        nxt = _aged(key)
        if nxt is not None and nxt not in seen:
            seen[nxt] = len(seen)
            frontier.append(nxt)
        if len(seen) > type_cap:
            raise ValueError(f"extended type space exceeds {type_cap} types")

    types = sorted(seen, key=lambda k: (k[1] == INF, k[1], k[0]))
    index = {k: i for i, k in enumerate(types)}
    n = len(types)

    law_vecs = {}

    def law_vec(d_birth):
        if d_birth not in law_vecs:
            items = law(d_birth)
            law_vecs[d_birth] = (np.array([index[k] for k in items], dtype=int),
                                 np.array(list(items.values())))
        return law_vecs[d_birth]

    rows, cols, vals = [], [], []
    births = np.zeros(n)
    for j, key in enumerate(types):
        nxt = _aged(key)
        if nxt is not None:
            rows.append(index[nxt])
            cols.append(j)
            vals.append(1.0)
        beta = rate[key[0][0]]
        births[j] = beta
        if beta > 0:
            idx, p = law_vec(key[1] - 1)
            rows.extend(idx.tolist())
            cols.extend([j] * idx.size)
            vals.extend((beta * p).tolist())
    M = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    M.sum_duplicates()

    initial = np.zeros(n)
    idx, p = law_vec(INF)
    initial[idx] = p
    return TracingMatrix(M, types, index, initial, births, config, D_max)


def expected_total_infected(M, x0: np.ndarray) -> float:
    """``<x0, (I - M)^{-1} e> = sum_t <x0, M^t e>`` for a subcritical ``M``.

    Every individual present on a day counts once for that day, so with a
    one-day progeny matrix this is the expected number of individual-days
    spent in the type space. See :func:`expected_infections` for a count of
    distinct individuals.
    """
    A = M.matrix if isinstance(M, TracingMatrix) else M
    x0 = np.asarray(x0, dtype=float)
    rho = spectral_radius(A)[0]
    if rho >= 1:
        raise ValueError(f"supercritical progeny matrix (rho={rho:.6g}); the total diverges")
    y = _solve_resolvent(A, np.ones(A.shape[0]))
    return float(x0 @ y)


def expected_infections(tm: TracingMatrix, x0: np.ndarray | None = None) -> float:
    """Expected number of distinct individuals ever infected, index cases included."""
    x0 = tm.initial if x0 is None else np.asarray(x0, dtype=float)
    rho = spectral_radius(tm.matrix)[0]
    if rho >= 1:
        raise ValueError(f"supercritical progeny matrix (rho={rho:.6g}); the total diverges")
    y = _solve_resolvent(tm.matrix, tm.births)
    return float(x0.sum() + x0 @ y)


def _solve_resolvent(A, rhs):
    """Solve ``(I - A^T) y = rhs``."""
    n = A.shape[0]
    if sp.issparse(A):
        return spla.spsolve((sp.identity(n, format="csc") - A.T.tocsc()), rhs)
    return np.linalg.solve(np.eye(n) - np.asarray(A).T, rhs)


@dataclass(frozen=True)
class CriticalTracing:
    p_t: float | None
    rho_at_0: float
    rho_at_1: float
    reason: str = ""


def critical_tracing_probability(params: DiseaseParams, epsilon: float,
                                 D_max: int | None = None, phi0=frozenset({"H"}),
                                 tol: float = 1e-4, max_iter: int = 60) -> CriticalTracing:
    """Smallest tracing probability bringing ``rho`` down to 1, by bisection.

    Returns ``p_t=None`` when ``[0, 1]`` does not bracket criticality: already
    subcritical without tracing, or still supercritical with full tracing.
    """
    def rho(p):
        return tracing_progeny_matrix(TracingConfig(p, epsilon, D_max, phi0), params).spectral_radius()

    r0, r1 = rho(0.0), rho(1.0)
    if r0 < 1:
        return CriticalTracing(None, r0, r1, "subcritical without tracing")
    if r1 >= 1:
        return CriticalTracing(None, r0, r1, "supercritical even with full tracing")
    lo, hi = 0.0, 1.0
    mid, rm = 0.5, None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        rm = rho(mid)
        if abs(rm - 1.0) <= tol:
            break
        if rm > 1:
            lo = mid
        else:
            hi = mid
    return CriticalTracing(mid, r0, r1)


@dataclass(frozen=True)
class ExtendedRun:
    individual_days: int
    infections: int
    extinct: bool


def simulate_extended(config: TracingConfig, params: DiseaseParams, rng: np.random.Generator,
                      initial: Sequence[ExtendedType] | None = None, max_days: int = 10_000,
                      paths: Sequence[PhasePath] | None = None) -> ExtendedRun:
    """Individual-level run of the traced process; children drawn with :func:`sample_child_type`.

    Without ``initial`` a single untraced index case is drawn.
    """
    paths = enumerate_paths(params) if paths is None else paths
    rate = {"E": 0.0, "H": 0.0, "P": params.alpha_a, "A": params.alpha_a,
            "I1": params.alpha_i, "I2": params.alpha_i}
    if initial is None:
        initial = [sample_child_type(ExtendedType((), INF), config, params, rng, paths)]
    alive = list(initial)
    person_days = 0
    infections = len(alive)
    for _ in range(max_days):
        if not alive:
            return ExtendedRun(person_days, infections, True)
        person_days += len(alive)
        nxt = []
        for ind in alive:
            if not ind.phases:
                continue
            lam = rate[ind.phases[0]]
            aged = ExtendedType(ind.phases[1:], ind.days_until_test - 1)
            if lam > 0:
                for _ in range(rng.poisson(lam)):
                    nxt.append(sample_child_type(aged, config, params, rng, paths))
                    infections += 1
            if aged.phases:
                nxt.append(aged)
        alive = nxt
    return ExtendedRun(person_days, infections, not alive)


@dataclass(frozen=True)
class SweepRow:
    p_t: float
    epsilon: float
    rho: float
    expected_total: float


def tracing_sweep(params: DiseaseParams, p_ts: Sequence[float], epsilons: Sequence[float],
                  D_max: int | None = None, phi0=frozenset({"H"})) -> list[SweepRow]:
    """``rho`` and the expected total over a ``(p_t, epsilon)`` grid.

    The total is ``nan`` wherever the process is supercritical.
    """
    rows = []
    for eps in epsilons:
        for p in p_ts:
            tm = tracing_progeny_matrix(TracingConfig(p, eps, D_max, phi0), params)
            rho = tm.spectral_radius()
            total = expected_total_infected(tm, tm.initial) if rho < 1 else math.nan
            rows.append(SweepRow(float(p), float(eps), rho, total))
    return rows
