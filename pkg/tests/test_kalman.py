import numpy as np
import pytest

from branchepi.branching import offspring_covariance, simulate_batch
from branchepi.core import baseline_params, new_state, state_index
from branchepi.kalman import (FilterState, MeasurementModel, filter_series, hidden_totals,
                              kalman_step, process_noise)
from branchepi.meanfield import build_transition_matrix, simulate_meanfield

H = 25
DIM = 126
BASE = baseline_params()
M_BASE = build_transition_matrix(BASE).matrix
H_IDX = state_index("H", None, H)


def test_zero_weights_zero_noise():
    assert np.all(process_noise(BASE, np.zeros(DIM)) == 0)


@pytest.mark.parametrize("parent", [("E", 3), ("P", 2), ("I1", 6), ("A", 4)])
def test_one_hot_weight_gives_parent_covariance(parent):
    w = np.zeros(DIM)
    w[state_index(*parent, H)] = 1.0
    np.testing.assert_allclose(process_noise(BASE, w), offspring_covariance(parent, BASE).dense(DIM),
                               atol=1e-15)


def test_negative_weights_rejected():
    w = np.zeros(DIM)
    w[3] = -1.0
    with pytest.raises(ValueError):
        process_noise(BASE, w)


def test_noise_matches_step_covariance():
    x0 = new_state(H, {("E", 1): 6, ("P", 1): 4, ("I1", 3): 5, ("A", 2): 3}, dtype=np.int64)
    n, t = 50_000, 3
    runs = simulate_batch(x0, BASE, t, n, seed=12).states.astype(float)
    u = runs[:, t] - runs[:, t - 1] @ M_BASE.T
    Q = process_noise(BASE, np.linalg.matrix_power(M_BASE, t - 1) @ x0)
    live = np.flatnonzero(u.var(axis=0) + np.diag(Q) > 0)
    D = u[:, live] - u[:, live].mean(axis=0)
    emp = D.T @ D / (n - 1)
    se = np.sqrt(np.var(D[:, :, None] * D[:, None, :], axis=0) / n)
    assert np.all(np.abs(emp - Q[np.ix_(live, live)]) <= 3 * se + 1e-12)


def test_huge_noise_ignores_observation():
    prior = FilterState(new_state(H, {("I1", 6): 50.0}), np.eye(DIM), 0)
    Q = process_noise(BASE, prior.x_hat)
    out = kalman_step(prior, M_BASE, Q, MeasurementModel((H_IDX,), [[1e12]]), 1000.0)
    np.testing.assert_allclose(out.x_hat, out.x_pred, atol=1e-6)


def test_full_observation_exact():
    rng = np.random.default_rng(0)
    prior = FilterState(rng.uniform(0, 5, DIM), np.eye(DIM), 0)
    y = rng.uniform(0, 10, DIM)
    # Q = I keeps every predicted variance positive; M alone has zero rows
    out = kalman_step(prior, M_BASE, np.eye(DIM),
                      MeasurementModel(tuple(range(DIM)), np.zeros((DIM, DIM))), y)
    np.testing.assert_allclose(out.x_hat, y, atol=1e-9)


def test_noise_free_observed_coordinate_matches():
    rng = np.random.default_rng(1)
    x0 = new_state(H, {("E", 1): 30.0})
    obs = rng.poisson(5, 40).astype(float)
    states = filter_series(obs, BASE, x0, P0=np.eye(DIM), R_policy=0.0)
    for s, y in zip(states[1:], obs):
        assert s.x_hat[H_IDX] == pytest.approx(y, abs=1e-6)


def test_empty_series():
    x0 = new_state(H, {("E", 1): 3.0})
    states = filter_series(np.zeros(0), BASE, x0)
    assert len(states) == 1
    np.testing.assert_array_equal(states[0].x_hat, x0)


def test_degenerate_filter_is_meanfield():
    x0 = new_state(H, {("E", 1): 200.0})
    traj = simulate_meanfield(M_BASE, x0, 60)
    states = filter_series(traj[1:, -1], BASE, x0, noise="none", R_policy=0.0)
    np.testing.assert_allclose(np.array([s.x_hat for s in states]), traj, atol=1e-9, rtol=0)


def test_no_gain_without_uncertainty():
    x0 = new_state(H, {("E", 1): 200.0})
    traj = simulate_meanfield(M_BASE, x0, 20)
    y = traj[1:, -1] + 3.0  # wrong observations must still be ignored
    states = filter_series(y, BASE, x0, noise="none", R_policy=2.0)
    for s in states[1:]:
        np.testing.assert_array_equal(s.x_hat, s.x_pred)


def test_missing_days_predict_only():
    x0 = new_state(H, {("E", 1): 50.0})
    obs = np.array([0.0, np.nan, 0.0, np.nan])
    states = filter_series(obs, BASE, x0, P0=np.eye(DIM))
    assert states[2].innovation is None
    np.testing.assert_array_equal(states[2].x_hat, M_BASE @ states[1].x_hat)
    assert states[3].innovation is not None


def test_covariance_stays_psd():
    x0 = new_state(H, {("E", 1): 20}, dtype=np.int64)
    run = simulate_batch(x0, BASE, 60, 1, seed=3).states[0]
    states = filter_series(run[1:, -1], BASE, x0.astype(float))
    for s in states:
        np.testing.assert_allclose(s.P, s.P.T)
        assert np.linalg.eigvalsh(s.P).min() >= -1e-9 * max(1.0, np.abs(s.P).max())


def test_open_loop_weights_policy():
    x0 = new_state(H, {("E", 1): 20.0})
    obs = np.full(10, np.nan)
    a = filter_series(obs, BASE, x0, noise="open_loop")
    b = filter_series(obs, BASE, x0, noise="filtered")
    # with no updates the filtered estimate is the open-loop forecast
    for s, r in zip(a, b):
        np.testing.assert_allclose(s.P, r.P, atol=1e-9)
    with pytest.raises(ValueError):
        filter_series(obs, BASE, x0, noise="bogus")


def test_measurement_model_validation():
    with pytest.raises(ValueError):
        MeasurementModel((1, 1), np.eye(2))
    with pytest.raises(ValueError):
        MeasurementModel((1,), np.eye(2))


def test_filter_beats_open_loop():
    # small version of the acceptance study: 20 surviving replications
    x0 = new_state(H, {("E", 1): 10}, dtype=np.int64)
    T = 90
    runs = simulate_batch(x0, BASE, T, 60, seed=31).states
    runs = [r for r in runs if r[-1, :-1].sum() > 0][:20]
    open_loop = simulate_meanfield(M_BASE, x0.astype(float), T)
    wins = 0
    for run in runs:
        states = filter_series(run[1:, -1], BASE, x0.astype(float))
        est = hidden_totals(np.array([s.x_hat for s in states]), H)
        truth = hidden_totals(run, H)
        ref = hidden_totals(open_loop, H)
        err = sum(np.sum((est[p] - truth[p]) ** 2) for p in ("E", "A"))
        err_ref = sum(np.sum((ref[p] - truth[p]) ** 2) for p in ("E", "A"))
        wins += err < err_ref
    assert len(runs) == 20
    assert wins >= 18


def test_innovations_are_white():
    a = 0.08576  # near-critical, so counts neither explode nor die out
    p = baseline_params(alpha_i=a, alpha_a=a)
    rng = np.random.default_rng(8)
    lags, scales = [], []
    for k in range(10):
        x0 = np.rint(rng.uniform(0, 1, DIM) * 200).astype(np.int64)
        run = simulate_batch(x0, p, 200, 1, seed=100 + k).states[0]
        y = run[1:, -1] + rng.normal(0, 2, 200)
        states = filter_series(y, p, x0.astype(float), R_policy=4.0)
        z = np.array([s.standardized_innovation()[0] for s in states[1:]])
        lags.append(np.corrcoef(z[:-1], z[1:])[0, 1])
        scales.append(z.std())
    assert abs(np.mean(lags)) < 0.1
    assert np.mean(scales) == pytest.approx(1.0, abs=0.15)
