"""Kalman filtering of the hidden compartments from daily hospital admissions.

The branching process is written as ``X(t) = M X(t-1) + u(t)`` where the
noise ``u(t)`` has covariance ``Q(t) = sum_j w_j S_j``: ``S_j`` is the
one-day child covariance of a type-``j`` parent and ``w_j`` the expected
number of such parents.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .branching import offspring_covariance
from .core import DiseaseParams, RateSchedule, block, index_to_state, state_index
from .meanfield import build_transition_matrix

JITTER = 1e-10


@dataclass(frozen=True)
class FilterState:
    """Estimate and covariance on day ``t``.

    ``innovation`` and ``innovation_cov`` are ``None`` on days without an
    update (the initial state and predict-only days).
    """

    x_hat: np.ndarray
    P: np.ndarray
    t: int
    innovation: np.ndarray | None = None
    innovation_cov: np.ndarray | None = None
    x_pred: np.ndarray | None = None

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.P), 0.0, None))

    def standardized_innovation(self) -> np.ndarray | None:
        """Innovation whitened by the Cholesky factor of its covariance."""
        if self.innovation is None:
            return None
        L = np.linalg.cholesky(self.innovation_cov + JITTER * np.eye(len(self.innovation)))
        return sla.solve_triangular(L, self.innovation, lower=True)


@dataclass(frozen=True)
class MeasurementModel:
    """Observed coordinates (rows of the projection) and their noise covariance."""

    indices: tuple[int, ...]
    R: np.ndarray

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("observed coordinates must be distinct")
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (len(idx), len(idx)):
            raise ValueError(f"R has shape {R.shape}, expected {(len(idx), len(idx))}")
        if not np.allclose(R, R.T):
            raise ValueError("R must be symmetric")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "R", R)

    def projection(self, dim: int) -> np.ndarray:
        H = np.zeros((len(self.indices), dim))
        H[np.arange(len(self.indices)), self.indices] = 1.0
        return H


class NoiseModel:
    """Precomputed pieces of ``Q``: the parent-fate covariances are fixed,
    only the exposure variance on (E,1) depends on the contact rates."""

    def __init__(self, params: DiseaseParams):
        self.params = params
        dim = self.dim = params.dim
        rows, cols, vals = [], [], []
        for j in range(dim):
            cov = offspring_covariance(index_to_state(j, params.h), params, 0.0, 0.0)
            if cov.coords.size == 0:
                continue
            flat = (cov.coords[:, None] * dim + cov.coords[None, :]).ravel()
            rows.extend(flat.tolist())
            cols.extend([j] * flat.size)
            vals.extend(cov.S.ravel().tolist())
        self.fate = sp.csr_matrix((vals, (rows, cols)), shape=(dim * dim, dim))
        h = params.h
        self.mask_i = np.zeros(dim)
        self.mask_a = np.zeros(dim)
        for phase in ("I1", "I2"):
            self.mask_i[block(phase, h)] = 1.0
        for phase in ("P", "A"):
            self.mask_a[block(phase, h)] = 1.0
        self.e1 = state_index("E", 1, h)

    def __call__(self, weights: np.ndarray, alpha_i: float | None = None,
                 alpha_a: float | None = None) -> np.ndarray:
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"weights have shape {w.shape}, expected ({self.dim},)")
        if np.any(w < 0):
            raise ValueError("process-noise weights must be nonnegative")
        ai = self.params.alpha_i if alpha_i is None else alpha_i
        aa = self.params.alpha_a if alpha_a is None else alpha_a
        Q = (self.fate @ w).reshape(self.dim, self.dim)
        Q[self.e1, self.e1] += ai * (self.mask_i @ w) + aa * (self.mask_a @ w)
        return 0.5 * (Q + Q.T)


def process_noise(params: DiseaseParams, weights: np.ndarray, alpha_i: float | None = None,
                  alpha_a: float | None = None) -> np.ndarray:
    """``Q = sum_j weights_j S_j``."""
    return NoiseModel(params)(weights, alpha_i, alpha_a)


def _innovation_solve(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``S^{-1} B`` for symmetric ``S``, retrying once with a small jitter."""
    try:
        return sla.cho_solve(sla.cho_factor(S), B)
    except np.linalg.LinAlgError:
        pass
    try:
        return sla.cho_solve(sla.cho_factor(S + JITTER * np.eye(S.shape[0])), B)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            "innovation covariance is singular; add measurement noise or prior covariance") from err


def kalman_step(state: FilterState, M, Q: np.ndarray, model: MeasurementModel,
                y: np.ndarray | float | None) -> FilterState:
    """Predict with ``M`` and ``Q``, then correct with ``y`` if it is present."""
    A = np.asarray(M, dtype=float)
    x_pred = A @ state.x_hat
    P_pred = A @ state.P @ A.T + Q
    P_pred = 0.5 * (P_pred + P_pred.T)
    t = state.t + 1
    y = None if y is None else np.atleast_1d(np.asarray(y, dtype=float))
    if y is None or np.any(np.isnan(y)):
        return FilterState(x_pred, P_pred, t, x_pred=x_pred)
    idx = list(model.indices)
    if y.shape != (len(idx),):
        raise ValueError(f"observation has shape {y.shape}, expected ({len(idx)},)")
    innovation = y - x_pred[idx]
    S = P_pred[np.ix_(idx, idx)] + model.R
    S = 0.5 * (S + S.T)
    PHt = P_pred[:, idx]
    gain_t = _innovation_solve(S, PHt.T)  # K^T
    x_hat = x_pred + gain_t.T @ innovation
    P = P_pred - gain_t.T @ PHt.T
    P = 0.5 * (P + P.T)
    return FilterState(x_hat, P, t, innovation, S, x_pred)


def poisson_noise(y: np.ndarray) -> np.ndarray:
    """Default measurement variance ``max(y, 1)`` on the diagonal."""
    return np.diag(np.maximum(np.atleast_1d(y), 1.0))


def _measurement_cov(policy, y: np.ndarray) -> np.ndarray:
    if policy == "poisson":
        return poisson_noise(y)
    if callable(policy):
        return np.atleast_2d(np.asarray(policy(y), dtype=float))
    R = np.asarray(policy, dtype=float)
    return np.diag(np.full(y.size, float(R))) if R.ndim == 0 else np.atleast_2d(R)


def filter_series(observations, params: DiseaseParams, x0: np.ndarray,
                  P0: np.ndarray | None = None,
                  R_policy: str | float | np.ndarray | Callable = "poisson",
                  noise: str = "filtered", schedule: RateSchedule | None = None,
                  observed: Sequence[int] | None = None) -> list[FilterState]:
    """Filter ``y(1..T)``; returns ``T+1`` states starting with the prior on day 0.

    ``observations`` is ``(T,)`` for a single observed coordinate (``x_H`` by
    default) or ``(T, m)``. NaN entries are days with no measurement.

    ``noise`` chooses the process-noise weights: ``"filtered"`` uses the
    clamped previous estimate, ``"open_loop"`` the mean-field forecast
    ``M^{t-1} x0``, and ``"none"`` sets ``Q = 0``.
    """
    if noise not in ("filtered", "open_loop", "none"):
        raise ValueError(f"unknown noise policy {noise!r}")
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    T = obs.shape[0]
    idx = tuple(observed) if observed is not None else (state_index("H", None, params.h),)
    if obs.shape[1] != len(idx):
        raise ValueError(f"{obs.shape[1]} observation columns for {len(idx)} coordinates")
    dim = params.dim
    x0 = np.asarray(x0, dtype=float)
    P0 = np.zeros((dim, dim)) if P0 is None else np.asarray(P0, dtype=float)
    if schedule is not None and len(schedule) < T:
        raise ValueError(f"schedule covers {len(schedule)} days, {T} observed")

    noise_model = NoiseModel(params) if noise != "none" else None
    fixed_M = build_transition_matrix(params).matrix if schedule is None else None
    states = [FilterState(x0, P0, 0)]
    open_loop = x0.copy()
    for t in range(T):
        if schedule is None:
            ai, aa, M = params.alpha_i, params.alpha_a, fixed_M
        else:
            ai, aa = schedule.at(t)
            M = build_transition_matrix(params, ai, aa).matrix
        prev = states[-1]
        if noise == "none":
            Q = np.zeros((dim, dim))
        elif noise == "open_loop":
            Q = noise_model(np.maximum(open_loop, 0.0), ai, aa)
        else:
            Q = noise_model(np.maximum(prev.x_hat, 0.0), ai, aa)
        open_loop = M @ open_loop
        y = obs[t]
        if np.any(np.isnan(y)):
            states.append(kalman_step(prev, M, Q, MeasurementModel(idx, np.zeros((len(idx),) * 2)), None))
            continue
        model = MeasurementModel(idx, _measurement_cov(R_policy, y))
        states.append(kalman_step(prev, M, Q, model, y))
    return states


def hidden_totals(x: np.ndarray, h: int) -> dict[str, np.ndarray]:
    """Phase totals of the hidden E and A compartments (works on stacked states)."""
    x = np.asarray(x)
    return {p: x[..., block(p, h)].sum(axis=-1) for p in ("E", "A")}
