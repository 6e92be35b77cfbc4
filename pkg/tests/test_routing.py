import numpy as np
import pytest
import scipy.linalg as sla

from branchepi.core import baseline_params, block, new_state
from branchepi.meanfield import build_transition_matrix, simulate_meanfield
from branchepi.routing import (CohortSystem, contact_decomposition, entropy, epidemic_stage,
                               infection_rate_matrix, maxent_routing, normalize_beta,
                               routing_stage, simulate_cohorts, transit_contacts)

H = 25
DIM = 126


# ---------------------------------------------------------------- contacts

def test_unit_transmission_gives_contacts():
    n = np.array([[2.0, 3.0], [1.0, 4.0]])
    np.testing.assert_array_equal(infection_rate_matrix(1.0, n, [100, 300]), n)


def test_single_cohort_rate():
    assert infection_rate_matrix(0.1, [[3.0]], [50])[0, 0] == pytest.approx(0.3)


def test_reciprocity_forces_reverse_rate():
    N = [100, 300]
    infection_rate_matrix(0.5, [[0.0, 3.0], [1.0, 0.0]], N)
    with pytest.raises(ValueError, match=r"\(0, 1\)"):
        infection_rate_matrix(0.5, [[0.0, 3.0], [2.0, 0.0]], N)
    with pytest.raises(ValueError):
        infection_rate_matrix(1.5, [[1.0]], [10])


def test_decomposition_checks_each_setting():
    N = np.array([100.0, 300.0])
    good = np.array([[1.0, 3.0], [1.0, 2.0]])
    ci = contact_decomposition(N, home=good, work=2 * good)
    np.testing.assert_allclose(ci.total, 3 * good)
    np.testing.assert_allclose(ci.alpha(0.1), 0.3 * good)
    with pytest.raises(ValueError, match="school"):
        contact_decomposition(N, home=good, school=np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_transit_single_location():
    v = np.array([[10.0], [30.0]])
    N = np.array([100.0, 200.0])
    np.testing.assert_allclose(transit_contacts(v, [1.0], N), v @ v.T / N[:, None])


def test_transit_reciprocity_exact():
    rng = np.random.default_rng(3)
    for _ in range(20):
        N = rng.uniform(10, 1000, 6)
        v = rng.uniform(0, 50, (6, 4))
        nT = transit_contacts(v, rng.uniform(0.1, 2, 4), N)
        flow = N[:, None] * nT
        np.testing.assert_allclose(flow, flow.T, rtol=1e-13)


def test_beta_gauge_leaves_rates_unchanged():
    rng = np.random.default_rng(4)
    N = rng.uniform(10, 1000, 4)
    v = rng.uniform(0, 50, (4, 3))
    beta = np.array([0.5, 2.0, 3.5])
    b, eta = normalize_beta(beta)
    assert b.mean() == pytest.approx(1.0)
    q = 0.01
    a1 = infection_rate_matrix(q, transit_contacts(v, beta, N), N)
    a2 = infection_rate_matrix(q * eta, transit_contacts(v, b, N), N)
    np.testing.assert_allclose(a1, a2, rtol=1e-12)


def test_empty_cohort_with_visits_rejected():
    with pytest.raises(ValueError):
        transit_contacts([[1.0], [2.0]], [1.0], [0.0, 10.0])


# ---------------------------------------------------------------- dynamics

def system(states, N, alpha, routing, params=None, **kw):
    params = baseline_params() if params is None else params
    return CohortSystem(list(range(len(N))), params, states, N, alpha, routing, **kw)


def test_single_cohort_stage_is_base_step():
    x = np.random.default_rng(0).uniform(0, 10, DIM)
    s = system([x], [1000.0], [[0.35]], [[1.0]])
    M = build_transition_matrix(baseline_params(), 0.35, 0.35).matrix
    np.testing.assert_array_equal(epidemic_stage(s, 0)[0], M @ x)


def test_uncoupled_cohorts_age_independently():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 10, (2, DIM))
    s = system(X, [10.0, 10.0], np.zeros((2, 2)), np.eye(2))
    M0 = build_transition_matrix(baseline_params(), 0.0, 0.0).matrix
    np.testing.assert_array_equal(epidemic_stage(s, 0), [M0 @ X[0], M0 @ X[1]])


def test_cross_infection_lands_in_target():
    x1 = new_state(H, {("I1", 2): 10.0, ("A", 3): 4.0})
    s = system([x1, np.zeros(DIM)], [10.0, 10.0], [[0.0, 0.2], [0.0, 0.0]], np.eye(2))
    Y = epidemic_stage(s, 0)
    assert Y[0, 0] == 0.0
    assert Y[1, 0] == pytest.approx(0.2 * 14)


def test_identity_routing():
    Y = np.random.default_rng(2).uniform(0, 5, (3, DIM))
    X, N = routing_stage(Y, np.eye(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(X, Y)
    np.testing.assert_array_equal(N, [1.0, 2.0, 3.0])


def test_swap_routing_keeps_hospital_in_place():
    Y = np.random.default_rng(3).uniform(0, 5, (2, DIM))
    X, N = routing_stage(Y, np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([5.0, 7.0]))
    np.testing.assert_array_equal(X[0, :-1], Y[1, :-1])
    np.testing.assert_array_equal(X[:, -1], Y[:, -1])
    np.testing.assert_array_equal(N, [7.0, 5.0])


def test_leaky_routing_loses_ten_percent():
    Y = np.random.default_rng(4).uniform(0, 5, (3, DIM))
    R = np.full((3, 3), 0.3)
    X, _ = routing_stage(Y, R, np.ones(3))
    assert X[:, :-1].sum() == pytest.approx(0.9 * Y[:, :-1].sum(), rel=1e-14)


def test_stochastic_routing_conserves_mass():
    rng = np.random.default_rng(5)
    Y = rng.uniform(0, 5, (4, DIM))
    R = rng.dirichlet(np.ones(4), 4)
    X, N = routing_stage(Y, R, np.full(4, 10.0))
    assert X[:, :-1].sum() == pytest.approx(Y[:, :-1].sum(), rel=1e-13)
    assert N.sum() == pytest.approx(40.0)


def test_routing_validation():
    Y = np.zeros((2, DIM))
    with pytest.raises(ValueError):
        routing_stage(Y, np.array([[0.7, 0.5], [0.0, 1.0]]), np.ones(2))
    with pytest.raises(ValueError):
        routing_stage(Y, np.eye(3), np.ones(2))


def test_arrivals_only_change_population():
    s = system(np.zeros((1, DIM)), [100.0], [[0.3]], [[1.0]], arrivals=[5.0])
    tr = simulate_cohorts(s, 3)
    np.testing.assert_array_equal(tr.N[:, 0], [100, 105, 110, 115])
    assert tr.states.sum() == 0


def test_one_cohort_equals_meanfield():
    p = baseline_params(alpha_i=0.3, alpha_a=0.3)
    x0 = new_state(H, {("E", 1): 200.0})
    tr = simulate_cohorts(system([x0], [1e6], [[0.3]], [[1.0]], params=p), 60)
    np.testing.assert_array_equal(tr.states[:, 0], simulate_meanfield(build_transition_matrix(p), x0, 60))


def test_identical_decoupled_cohorts():
    x0 = new_state(H, {("E", 1): 50.0, ("I1", 3): 5.0})
    tr = simulate_cohorts(system([x0, x0], [1e4, 1e4], 0.3 * np.eye(2), np.eye(2)), 40)
    np.testing.assert_array_equal(tr.states[:, 0], tr.states[:, 1])


def test_pipeline_delay_before_admissions():
    # E lasts at least 3 days, P 1 and I1 5, so admissions start on day 9
    x0 = new_state(H, {("E", 1): 100.0})
    R = np.array([[0.5, 0.5], [0.0, 1.0]])
    tr = simulate_cohorts(system([x0, np.zeros(DIM)], [1e4, 1e4], np.zeros((2, 2)), R), 15)
    assert np.all(tr.x_H[:9, 1] == 0)
    assert tr.x_H[9, 1] > 0
    assert tr.states[1, 1, block("E", H)].sum() > 0


def test_time_varying_inputs():
    x0 = new_state(H, {("I1", 1): 10.0})
    s = system([x0], [100.0], lambda t: [[0.3 if t < 2 else 0.0]], lambda t: [[1.0]])
    tr = simulate_cohorts(s, 4)
    assert tr.states[1, 0, 0] == pytest.approx(3.0)
    assert tr.states[3, 0, 0] == 0.0


# ---------------------------------------------------------------- max entropy

def free_entries(cohorts):
    return [(i, j) for i, c in enumerate(cohorts) for j, d in enumerate(cohorts) if c[2] == d[2]]


def random_instance(seed, regions=("a", "b", "c")):
    rng = np.random.default_rng(seed)
    cohorts = [(r, s, 0) for r in regions for s in regions]
    N = rng.uniform(50, 500, len(cohorts))
    R = rng.uniform(0, 1, (len(cohorts),) * 2)
    R *= rng.uniform(0.5, 1.0, (len(cohorts), 1)) / R.sum(axis=1, keepdims=True)
    flows = {}
    for i, c in enumerate(cohorts):
        for j, d in enumerate(cohorts):
            key = (c[1], d[1], 0)
            flows[key] = flows.get(key, 0.0) + N[i] * R[i, j]
    return cohorts, N, flows


def flow_residual(est, N, flows):
    worst = 0.0
    for (r1, r2, a), target in flows.items():
        got = sum(N[i] * est.R[i, j] for i, c in enumerate(est.cohorts)
                  for j, d in enumerate(est.cohorts) if c[1] == r1 and d[1] == r2 and c[2] == d[2] == a)
        worst = max(worst, abs(got - target))
    return worst


def test_single_cohort_stays():
    est = maxent_routing([("a", "a", 0)], [120.0], {("a", "a", 0): 120.0})
    assert est.R[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_symmetric_instance_is_uniform():
    cohorts = [(r, s, 0) for r in "ab" for s in "ab"]
    N = np.full(4, 100.0)
    flows = {("a", "a", 0): 120.0, ("b", "b", 0): 120.0, ("a", "b", 0): 60.0, ("b", "a", 0): 60.0}
    est = maxent_routing(cohorts, N, flows)
    R = est.R
    # entries within one flow block are interchangeable, and the two regions mirror each other
    same = R[np.ix_([0, 2], [0, 2])]
    cross = R[np.ix_([0, 2], [1, 3])]
    assert np.ptp(same) <= 1e-10 and np.ptp(cross) <= 1e-10
    np.testing.assert_allclose(R[np.ix_([1, 3], [1, 3])], same, atol=1e-10)
    np.testing.assert_allclose(R[np.ix_([1, 3], [0, 2])], cross, atol=1e-10)


def test_constraints_satisfied():
    for seed in range(5):
        cohorts, N, flows = random_instance(seed)
        est = maxent_routing(cohorts, N, flows)
        assert flow_residual(est, N, flows) <= 1e-8
        assert est.R.sum(axis=1).max() <= 1 + 1e-8
        assert est.R.min() >= 0


def test_matches_convex_solver():
    cp = pytest.importorskip("cvxpy")
    cohorts, N, flows = random_instance(4)
    est = maxent_routing(cohorts, N, flows)
    scale = N.max()
    n = len(cohorts)
    R = cp.Variable((n, n), nonneg=True)
    cons = [cp.sum(R, axis=1) <= 1]
    for (r1, r2, a), target in flows.items():
        rows = [i for i, c in enumerate(cohorts) if c[1] == r1]
        cols = [j for j, c in enumerate(cohorts) if c[1] == r2]
        cons.append(cp.sum(cp.multiply((N[rows] / scale)[:, None], R[rows][:, cols])) == target / scale)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.entr(R))), cons)
    prob.solve(solver=cp.CLARABEL)
    assert prob.status == "optimal"
    assert abs(est.objective - prob.value) <= 1e-5
    np.testing.assert_allclose(est.R, R.value, atol=1e-4)


def test_beats_feasible_perturbations():
    cohorts, N, flows = random_instance(7)
    est = maxent_routing(cohorts, N, flows)
    cells = free_entries(cohorts)
    keys = list(flows)
    A = np.zeros((len(keys), len(cells)))
    for k, (r1, r2, a) in enumerate(keys):
        for m, (i, j) in enumerate(cells):
            if cohorts[i][1] == r1 and cohorts[j][1] == r2:
                A[k, m] = N[i]
    basis = sla.null_space(A)
    rng = np.random.default_rng(8)
    base = np.array([est.R[i, j] for i, j in cells])
    rows = np.array([i for i, _ in cells])
    best = entropy(est.R)
    for _ in range(100):
        d = basis @ rng.normal(size=basis.shape[1])
        d /= np.abs(d).max()
        step = 0.05
        while True:  # shrink until the point is feasible
            cand = base + step * d
            row_sums = np.bincount(rows, cand, minlength=len(cohorts))
            if cand.min() >= 0 and row_sums.max() <= 1:
                break
            step /= 2
        R = np.zeros_like(est.R)
        for (i, j), v in zip(cells, cand):
            R[i, j] = v
        assert entropy(R) <= best + 1e-9


def test_infeasible_flow_named():
    cohorts = [("a", "a", 0), ("b", "a", 0), ("a", "b", 0), ("b", "b", 0)]
    N = [10.0, 10.0, 10.0, 10.0]
    with pytest.raises(ValueError, match="flows out of a "):
        maxent_routing(cohorts, N, {("a", "a", 0): 15.0, ("a", "b", 0): 10.0})
    with pytest.raises(ValueError, match="'z'"):
        maxent_routing(cohorts, N, {("a", "z", 0): 1.0})


def test_missing_flow_counts_as_zero():
    cohorts = [(r, s, 0) for r in "ab" for s in "ab"]
    est = maxent_routing(cohorts, np.full(4, 50.0), {("a", "a", 0): 80.0, ("b", "b", 0): 60.0})
    rows_a = [i for i, c in enumerate(cohorts) if c[1] == "a"]
    cols_b = [j for j, c in enumerate(cohorts) if c[1] == "b"]
    assert est.R[np.ix_(rows_a, cols_b)].sum() == 0.0
