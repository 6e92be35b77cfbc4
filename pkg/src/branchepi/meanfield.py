"""Deterministic linear dynamics ``x(t+1) = M x(t)`` and tools built on it."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (PHASES, DiseaseParams, RateSchedule, block, state_dim,
                   state_index, validate_state)

log = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-3


@dataclass(frozen=True)
class TransitionMatrix:
    """Mean one-day progeny matrix of a single population."""

    matrix: np.ndarray
    h: int
    alpha_i: float
    alpha_a: float

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        n = state_dim(self.h)
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match h={self.h}")
        if np.any(m < 0):
            raise ValueError("transition matrix must be nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    def __matmul__(self, other):
        return self.matrix @ other

    @property
    def shape(self):
        return self.matrix.shape


def _as_matrix(M) -> np.ndarray:
    if isinstance(M, TransitionMatrix):
        return M.matrix
    return M


def transition_parts(params: DiseaseParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``M = M0 + alpha_i * Mi + alpha_a * Ma``.

    ``M0`` holds aging and branching; ``Mi``/``Ma`` have ones in row (E,1)
    at the symptomatic (I1, I2) and prodromic/asymptomatic (P, A) columns.
    """
    h = params.h
    n = state_dim(h)
    M0 = np.zeros((n, n))
    for phase in PHASES:
        r = params.rates(phase)
        o = block(phase, h).start
        d = np.arange(h - 1)
        M0[o + d + 1, o + d] = 1.0 - r[:-1]

    def exit_row(target: int, source: str, weight: float):
        cols = block(source, h)
        M0[target, cols] += weight * params.rates(source)

    exit_row(state_index("P", 1, h), "E", 1.0)
    exit_row(state_index("I1", 1, h), "P", params.p_i)
    exit_row(state_index("A", 1, h), "P", 1.0 - params.p_i)
    exit_row(state_index("I2", 1, h), "I1", 1.0 - params.p_h)
    exit_row(state_index("H", None, h), "I1", params.p_h)

    e1 = state_index("E", 1, h)
    Mi = np.zeros((n, n))
    Ma = np.zeros((n, n))
    for phase in ("I1", "I2"):
        Mi[e1, block(phase, h)] = 1.0
    for phase in ("P", "A"):
        Ma[e1, block(phase, h)] = 1.0
    return M0, Mi, Ma


def build_transition_matrix(params: DiseaseParams, alpha_i: float | None = None,
                            alpha_a: float | None = None) -> TransitionMatrix:
    """Assemble ``M`` for ``params`` (contact rates may be overridden)."""
    ai = params.alpha_i if alpha_i is None else alpha_i
    aa = params.alpha_a if alpha_a is None else alpha_a
    M0, Mi, Ma = transition_parts(params)
    return TransitionMatrix(M0 + ai * Mi + aa * Ma, params.h, ai, aa)


def simulate_meanfield(M, x0: np.ndarray, T: int) -> np.ndarray:
    """Trajectory ``[x0, M x0, ..., M^T x0]`` as a ``(T+1, dim)`` array."""
    A = _as_matrix(M)
    x0 = np.asarray(x0, dtype=float)
    if A.shape[1] != x0.shape[-1]:
        raise ValueError(f"dimension mismatch: M is {A.shape}, x0 has {x0.shape[-1]}")
    if T < 0:
        raise ValueError("T must be nonnegative")
    out = np.empty((T + 1, x0.size))
    out[0] = x0
    for t in range(T):
        out[t + 1] = A @ out[t]
    return out


def simulate_meanfield_schedule(params: DiseaseParams, x0: np.ndarray,
                                schedule: RateSchedule, T: int | None = None) -> np.ndarray:
    """Mean-field run with day-varying contact rates."""
    T = len(schedule) if T is None else T
    if T > len(schedule):
        raise ValueError(f"schedule covers {len(schedule)} days, {T} requested")
    validate_state(x0, params.h)
    M0, Mi, Ma = transition_parts(params)
    out = np.empty((T + 1, params.dim))
    out[0] = x0
    rates, A = None, None
    for t in range(T):
        if schedule.at(t) != rates:
            rates = schedule.at(t)
            A = M0 + rates[0] * Mi + rates[1] * Ma
        out[t + 1] = A @ out[t]
    return out


class ConvergenceError(RuntimeError):
    """Power iteration failed; ``estimate`` carries the last iterate."""

    def __init__(self, msg, estimate=None, vector=None):
        super().__init__(msg)
        self.estimate = estimate
        self.vector = vector


def _power_iterate(A, x, shift, tol, max_iter):
    lam = np.inf
    for k in range(max_iter):
        y = A @ x
        if shift:
            y = y + shift * x
        s = y.sum()
        if s <= 0:
            # x lies in the kernel: nilpotent direction
            return 0.0, x, k, True
        lam_new = s - shift
        y /= s
        resid = np.abs(A @ y - lam_new * y).sum()
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)) and resid <= tol:
            return lam_new, y, k, True
        lam, x = lam_new, y
    return lam, x, max_iter, False


def spectral_radius(M, tol: float = 1e-10, max_iter: int = 10_000) -> tuple[float, np.ndarray]:
    """Perron root and nonnegative eigenvector (unit 1-norm) of a nonnegative matrix.

    Plain power iteration from the all-ones vector. If it stagnates (e.g. on
    a periodic matrix) it restarts from the last iterate on ``M + s I``,
    which has the same Perron vector but no competing eigenvalue of equal
    modulus. Works with dense arrays and scipy sparse matrices.
    """
    A = _as_matrix(M)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    x = np.full(n, 1.0 / n)
    first = max_iter // 4
    lam, x, _, ok = _power_iterate(A, x, 0.0, tol, first)
    if not ok:
        shift = max(float(np.asarray(abs(A).sum(axis=0)).max()), 1e-12)
        log.debug("power iteration stagnated at %.6g; restarting with shift %.3g", lam, shift)
        lam, x, _, ok = _power_iterate(A, x, shift, tol, max_iter - first)
    if not ok:
        raise ConvergenceError("power iteration did not converge", lam, x)
    if lam < tol:
        lam = 0.0
    return float(lam), x


def perron_oracle(M) -> float:
    """Spectral radius from a dense eigensolver (independent check)."""
    A = np.asarray(_as_matrix(M).todense() if hasattr(_as_matrix(M), "todense") else _as_matrix(M))
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def estimate_growth_rate(series: Sequence[float]) -> float:
    """``exp`` of the least-squares slope of ``log(series)`` against day index."""
    y = np.asarray(series, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two points")
    if np.any(y <= 0):
        raise ValueError("series must be positive to take logs")
    t = np.arange(y.size, dtype=float)
    tc = t - t.mean()
    slope = float(tc @ (np.log(y) - np.log(y).mean()) / (tc @ tc))
    return float(np.exp(slope))


@dataclass(frozen=True)
class ShockFit:
    theta0: tuple[float, float]
    theta1: tuple[float, float]
    C: float
    residual: float
    lambda_hat: float

    def __post_init__(self):
        if min(self.theta0) < 0 or min(self.theta1) < 0 or self.residual < 0:
            raise ValueError("rates and residual must be nonnegative")


def _golden(f, a: float, b: float, tol: float = 1e-7, max_iter: int = 200) -> tuple[float, float]:
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def _refine_on_grid(f, grid: np.ndarray, k: int) -> tuple[float, float]:
    """Golden-section search between the grid neighbours of index ``k``."""
    best = (float(grid[k]), f(float(grid[k])))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid.size - 1)]
    if hi > lo:
        x, fx = _golden(f, float(lo), float(hi))
        if fx < best[1]:
            best = (x, fx)
    return best


def fit_shock(observed: Sequence[float], t0: int, params: DiseaseParams,
              grid: Sequence[float], grid1: Sequence[float] | None = None,
              window: int = 14, two_d: bool = False,
              tol: float = CONSTRAINT_TOL) -> ShockFit:
    """Pre/post-shock contact rates from an ``x_H`` series with a shock on day ``t0``.

    The pre-shock rates ``theta0`` are constrained so that the Perron root
    of ``M(theta0)`` matches the growth rate regressed over the ``window``
    days ending at ``t0``. The state at ``t0`` is taken as ``C u(theta0)``
    with ``C u_H = x_H(t0)`` and propagated with ``M(theta1)``; ``theta1``
    minimizes the squared error against ``x_H(t)`` for ``t > t0``.

    By default ``alpha_i = alpha_a`` and the search is one-dimensional per
    phase; ``two_d=True`` searches ``(alpha_i, alpha_a)`` pairs on
    ``grid x grid`` instead.
    """
    y = np.asarray(observed, dtype=float)
    if not 0 < t0 < y.size - 1:
        raise ValueError("need observations before and after the shock day")
    if t0 + 1 < window:
        raise ValueError(f"pre-shock window of {window} days starts before day 0")
    post = y[t0 + 1:]
    if post.size == 0:
        raise ValueError("empty post-shock window")
    lam_hat = estimate_growth_rate(y[t0 - window + 1:t0 + 1])

    grid = np.asarray(sorted(grid), dtype=float)
    grid1 = grid if grid1 is None else np.asarray(sorted(grid1), dtype=float)
    M0, Mi, Ma = transition_parts(params)
    ih = state_index("H", None, params.h)

    def matrix(ai, aa):
        return M0 + ai * Mi + aa * Ma

    def perron(ai, aa):
        return spectral_radius(matrix(ai, aa))

    # feasible pre-shock rates
    if two_d:
        cands = [(ai, aa) for ai in grid for aa in grid]
    else:
        cands = [(a, a) for a in grid]
    lams = np.array([perron(*c)[0] for c in cands])
    feasible = [c for c, lam in zip(cands, lams) if abs(lam - lam_hat) <= tol]
    if not feasible and not two_d:
        # bracket the constraint between grid neighbours and bisect
        sign = np.sign(lams - lam_hat)
        for k in np.flatnonzero(sign[:-1] * sign[1:] < 0):
            lo, hi = grid[k], grid[k + 1]
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                if (perron(mid, mid)[0] - lam_hat) * sign[k] > 0:
                    lo = mid
                else:
                    hi = mid
            a = 0.5 * (lo + hi)
            if abs(perron(a, a)[0] - lam_hat) <= tol:
                feasible.append((a, a))
    if not feasible:
        raise ValueError(f"no pre-shock rates on the grid reach growth rate {lam_hat:.6g} "
                         f"within {tol}")

    def post_loss(z0, ai, aa):
        A = matrix(ai, aa)
        z = z0.copy()
        err = 0.0
        for obs in post:
            z = A @ z
            err += (z[ih] - obs) ** 2
        return err

    best = None
    for th0 in feasible:
        _, u = perron(*th0)
        if u[ih] <= 0:
            continue
        C = y[t0] / u[ih]
        z0 = C * u
        if two_d:
            vals = np.array([[post_loss(z0, ai, aa) for aa in grid1] for ai in grid1])
            i, j = np.unravel_index(np.argmin(vals), vals.shape)
            th1 = [float(grid1[i]), float(grid1[j])]
            loss = float(vals[i, j])
            # one round of coordinate-wise golden refinement
            for axis, k in ((0, i), (1, j)):
                def f(v, axis=axis):
                    th = list(th1)
                    th[axis] = v
                    return post_loss(z0, *th)
                v, fv = _refine_on_grid(f, grid1, k)
                if fv < loss:
                    th1[axis], loss = v, fv
            th1 = tuple(th1)
        else:
            vals = np.array([post_loss(z0, a, a) for a in grid1])
            k = int(np.argmin(vals))
            a, loss = _refine_on_grid(lambda v: post_loss(z0, v, v), grid1, k)
            th1 = (a, a)
        if best is None or loss < best.residual:
            best = ShockFit(tuple(map(float, th0)), tuple(map(float, th1)), float(C),
                            float(loss), lam_hat)
    if best is None:
        raise ValueError("Perron vector has no mass on x_H for any feasible pre-shock rate")
    return best


def ar_coefficients(M) -> np.ndarray:
    """Coefficients ``a_1..a_n`` with ``x_H(t) = sum_i a_i x_H(t-i)``.

    Uses the Faddeev-LeVerrier recurrence for the characteristic polynomial
    ``z^n + c_1 z^{n-1} + ... + c_n`` and returns ``a_i = -c_i``. Every
    coordinate of a mean-field trajectory obeys the same recursion, by
    Cayley-Hamilton. The recurrence loses precision as ``n`` grows; for
    ``h`` much above 15 the coefficients may overflow or be inaccurate.
    """
    A = np.asarray(_as_matrix(M), dtype=float)
    n = A.shape[0]
    c = np.zeros(n + 1)
    c[0] = 1.0
    Mk = np.zeros_like(A)
    eye = np.eye(n)
    for k in range(1, n + 1):
        Mk = A @ Mk + c[k - 1] * eye
        c[k] = -np.trace(A @ Mk) / k
        if not np.isfinite(c[k]):
            raise OverflowError(f"characteristic polynomial overflowed at degree {k}")
    return -c[1:]


def ar_predict(coeffs: np.ndarray, history: Sequence[float]) -> float:
    """One-step AR prediction from the last ``len(coeffs)`` values (oldest first)."""
    a = np.asarray(coeffs)
    hist = np.asarray(history, dtype=float)
    if hist.size < a.size:
        raise ValueError(f"need {a.size} past values, got {hist.size}")
    return float(a @ hist[::-1][:a.size])
