import numpy as np
import pytest
from scipy.optimize import minimize

from qkdgeat import protocol, qcore, tradeoff
from qkdgeat.tradeoff import TradeoffFunction


@pytest.fixture(scope="module")
def b92():
    spec = protocol.b92_preset(0.1)
    return spec, protocol.source_replacement(spec)


def test_objective_at_honest_noiseless_state(b92):
    spec, ops = b92
    psi = protocol.honest_state(spec, 0.0)
    val, _ = tradeoff.objective(ops, np.zeros(4), psi)
    assert val == pytest.approx(0.25, abs=1e-10)


def test_objective_rejects_infeasible_state(b92):
    _, ops = b92
    with pytest.raises(ValueError, match="marginal"):
        tradeoff.objective(ops, np.zeros(4), np.eye(4) / 4)


def test_objective_is_convex_on_random_pairs(b92):
    _, ops = b92
    rng = np.random.default_rng(2)
    lam = np.array([-1.0, 0.3, 0.2, 0.0])
    for _ in range(20):
        a = protocol.random_feasible_state(ops, rng)
        b = protocol.random_feasible_state(ops, rng)
        mid = tradeoff.objective(ops, lam, 0.5 * (a + b))[0]
        avg = 0.5 * (tradeoff.objective(ops, lam, a)[0] + tradeoff.objective(ops, lam, b)[0])
        assert mid <= avg + 1e-9


def test_reduced_objective_nonnegative_without_lambda(b92):
    _, ops = b92
    rng = np.random.default_rng(4)
    for _ in range(10):
        psi = protocol.random_feasible_state(ops, rng)
        assert tradeoff.b92_reduced_objective(ops, np.zeros(3), psi)[0] >= -1e-9


def test_reduced_objective_at_honest_noiseless_state(b92):
    # one secret bit per conclusive data round, and a quarter of data rounds are conclusive
    spec, ops = b92
    psi = protocol.honest_state(spec, 0.0)
    red = tradeoff.b92_reduced_objective(ops, np.zeros(3), psi)[0]
    assert red == pytest.approx(0.25 * (1 - spec.gamma), abs=1e-8)


def test_reduced_entropy_scales_with_data_weight():
    vals = []
    for g in (0.1, 0.3):
        spec = protocol.b92_preset(g)
        ops = protocol.source_replacement(spec)
        psi = protocol.honest_state(spec, 0.03)
        vals.append(tradeoff.b92_reduced_objective(ops, np.zeros(3), psi)[0] / (1 - g))
    assert vals[0] == pytest.approx(vals[1], abs=1e-10)


def test_frank_wolfe_infinite_tol_returns_start(b92):
    _, ops = b92
    start = protocol.random_feasible_state(ops, np.random.default_rng(0))
    psi, rep = tradeoff.frank_wolfe(ops, np.zeros(4), tol=np.inf, psi0=start)
    assert np.array_equal(psi, start)
    assert rep.iterations == 0


def test_frank_wolfe_decreases_from_mixed_start(b92):
    spec, ops = b92
    stats, _ = protocol.honest_model(spec, 0.02)
    lam = tradeoff.heuristic_lambda(ops, stats)
    uppers = [tradeoff.frank_wolfe(ops, lam, tol=0.0, max_iter=k)[1].upper_value for k in range(6)]
    assert all(b < a for a, b in zip(uppers, uppers[1:]))


def test_frank_wolfe_lambda_zero_below_honest_witness(b92):
    _, ops = b92
    _, rep = tradeoff.frank_wolfe(ops, np.zeros(4), tol=1e-6)
    assert rep.upper_value <= 0.25 + 1e-6
    assert rep.gap <= 1e-6


def test_lin_lower_bound_identity(b92):
    _, ops = b92
    bound, psi, _ = tradeoff.lin_lower_bound(np.eye(4), ops.alice_marginal)
    assert bound == pytest.approx(1.0, abs=1e-9)


def test_lin_lower_bound_against_random_sample(b92):
    _, ops = b92
    w = -ops.gamma_ops["fail"]
    bound, psi, _ = tradeoff.lin_lower_bound(w, ops.alice_marginal)
    rng = np.random.default_rng(8)
    sampled = min(np.real(np.trace(w @ protocol.random_feasible_state(ops, rng, rank=1 + k % 4)))
                  for k in range(10_000))
    assert bound <= sampled + 1e-12
    # the returned minimizer is feasible and attains the bound
    assert np.allclose(qcore.partial_trace(psi, (2, 2), [0]), ops.alice_marginal, atol=1e-9)
    assert np.real(np.trace(w @ psi)) == pytest.approx(bound, abs=1e-7)


def test_lin_lower_bound_diagonal_assignment():
    # diagonal w and diagonal marginal: each P basis state takes its cheapest Q slot
    rho = np.diag([0.3, 0.7]).astype(complex)
    costs = np.array([[2.0, -1.0, 0.5], [0.2, 0.4, -0.3]])
    bound, _, y = tradeoff.lin_lower_bound(np.diag(costs.ravel()).astype(complex), rho, 3)
    assert bound == pytest.approx(0.3 * -1.0 + 0.7 * -0.3, abs=1e-9)
    mu = bound - np.real(np.trace(rho @ y))
    assert np.allclose(np.diag(y).real + mu, costs.min(axis=1), atol=1e-6)


def test_certified_lambda_zero_bracketed(b92):
    # the infimum is positive for B92: no attack leaves Eve with full knowledge
    _, ops = b92
    c, rep = tradeoff.certified_c_lambda(ops, np.zeros(4))
    assert c <= rep.upper_value
    assert rep.gap <= 1e-7
    assert 0.0 < c < 0.25


def test_halving_tol_does_not_widen_gap(b92):
    _, ops = b92
    lam = np.array([-2.0, 0.5, 0.1, 0.0])
    g1 = tradeoff.certified_c_lambda(ops, lam, tol=1e-6)[1].gap
    g2 = tradeoff.certified_c_lambda(ops, lam, tol=5e-7)[1].gap
    assert g2 <= g1 + 1e-12


def test_certified_bound_soundness(b92):
    _, ops = b92
    lam = np.array([-3.0, 0.4, -0.2, 0.0])
    c, _ = tradeoff.certified_c_lambda(ops, lam)
    rng = np.random.default_rng(9)
    for _ in range(50):
        psi = protocol.random_feasible_state(ops, rng)
        h = protocol.conditional_entropy_sic(ops, psi)
        nu = protocol.statistics(ops, psi).values
        assert lam @ nu + c <= h + 1e-7


def test_heuristic_lambda_matches_constrained_minimum(b92):
    spec, ops = b92
    stats, _ = protocol.honest_model(spec, 0.02)
    lam = tradeoff.heuristic_lambda(ops, stats)
    c, _ = tradeoff.certified_c_lambda(ops, lam)
    ca = float(lam @ stats.values + c)

    # oracle: minimize the entropy directly under the statistics constraints
    prob = tradeoff.full_problem(ops, np.zeros(4))
    gams = [prob.compress(ops.gamma_ops[k]) for k in ops.c_labels[:3]]
    psi_of = lambda y: tradeoff._bm_map(prob, y)[-1]
    f = lambda y: tradeoff._pert_value_grad(prob, psi_of(y), want_grad=False)[0]
    cons = lambda y: np.array([np.real(np.trace(g @ psi_of(y))) for g in gams]) - stats.values[:3]
    best = np.inf
    for seed in range(2):
        y0 = tradeoff._initial_y(prob, seed)
        r = minimize(f, y0, method="SLSQP", constraints=[{"type": "eq", "fun": cons}],
                     options=dict(maxiter=2000, ftol=1e-12))
        if np.abs(cons(r.x)).max() < 1e-8:
            best = min(best, r.fun)
    assert ca <= best + 1e-7
    assert best - ca <= 5e-3


def test_lift_gamma_one_appends_max():
    g = tradeoff.generic_tradeoff(("a", "b"), np.array([0.0, -1.0]), 0.5)
    lifted = tradeoff.lift_test_data(g, 1.0)
    assert np.allclose(lifted.point_values(), [0.5, -0.5, 0.5])


def test_lift_constant_function():
    g = tradeoff.generic_tradeoff(("a", "b", "c"), np.zeros(3), 0.2)
    lifted = tradeoff.lift_test_data(g, 0.05)
    assert lifted.var_ub == 0
    assert np.allclose(lifted.point_values(), 0.2)


def test_lift_spread_two():
    g = tradeoff.generic_tradeoff(("a", "b"), np.array([2.0, 0.0]), -1.0)
    lifted = tradeoff.lift_test_data(g, 0.1)
    assert lifted.min_val == pytest.approx(1.0 - 20.0)
    assert lifted.var_ub == pytest.approx(40.0)


def test_tradeoff_json_roundtrip():
    g = tradeoff.generic_tradeoff(("x", "y"), np.array([0.25, -0.5]), 0.125)
    back = TradeoffFunction.from_json(g.to_json())
    assert back.labels == g.labels
    assert np.array_equal(back.lam, g.lam)
    assert back.var_ub == g.var_ub
