import math

import numpy as np
import pytest

from qkdgeat import keyrate, protocol, tradeoff
from qkdgeat.keyrate import ParameterError, SecurityParams


@pytest.fixture(scope="module")
def b92_bound():
    spec = protocol.b92_preset(0.1)
    nu, h_sv = keyrate.b92_honest_test(spec, 0.02)
    _, lam, c0 = keyrate.asymptotic_rate(spec, 0.02)
    return lam, c0, nu, h_sv


def flat(values, c=0.0):
    return tradeoff.generic_tradeoff(tuple("abcd"[: len(values)]), np.asarray(values, float), c)


def test_g_of_eps_small_eps():
    assert keyrate.g_of_eps(2e-10) == pytest.approx(-math.log2(2e-20), abs=1e-9)
    assert keyrate.g_of_eps(2e-10) == pytest.approx(65.44, abs=5e-3)


def test_v_term_for_constant_function_and_trivial_alphabet():
    br = keyrate.geat_terms(1.01, 1, flat([0.3, 0.3]), 1e-10)
    assert br.v_term == pytest.approx(math.log2(3) + math.sqrt(2), abs=1e-12)


def test_alpha_outside_range():
    with pytest.raises(ParameterError):
        keyrate.geat_terms(1.5, 3, flat([0.0]), 1e-10)


def test_lambda_ec_formula():
    n, h, eps = 1e6, 0.05, 5e-3
    expected = n * h + 2 * math.sqrt(n) * math.sqrt(1 - 2 * math.log2(eps / 2)) * math.log2(7) \
        + 2 * math.log2(2 / eps)
    assert keyrate.lambda_ec(n, h, 3, eps) == math.ceil(expected)


def test_threshold_without_variance_has_no_margin():
    k_ca, delta = keyrate.threshold_k_ca(0.2, flat([0.2, 0.2]), 1e6, 5e-3, 5e-11)
    assert delta == 0.0 and k_ca == 0.2


def test_threshold_rejects_swapped_epsilons():
    with pytest.raises(ParameterError):
        keyrate.threshold_k_ca(0.2, flat([0.2]), 1e6, 1e-11, 5e-11)


def test_bernstein_abort_edges():
    tf = flat([0.0, 1.0])
    assert keyrate.bernstein_abort(0.0, 1e6, tf) == 1.0
    b1 = keyrate.bernstein_abort(0.01, 1e4, tf)
    b2 = keyrate.bernstein_abort(0.01, 2e4, tf)
    assert b2 == pytest.approx(b1 ** 2, rel=1e-12)


def test_security_params_validation():
    with pytest.raises(ParameterError):
        SecurityParams(n=1e6, eps_pa=0.0)
    with pytest.raises(ParameterError):
        SecurityParams(n=1e6, s=0)
    p = SecurityParams(n=1e6)
    assert p.eps_cor == p.eps_kv
    assert p.eps_sec == pytest.approx(max(1e-10 + 8e-10, 8e-10) + 1e-10)


def test_blocked_length_reduces_to_unblocked_for_unit_step():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tf = flat(rng.uniform(-2, 2, size=3), rng.uniform(-1, 1))
        params = SecurityParams(n=10 ** rng.uniform(6, 12))
        br = keyrate.geat_terms(1 + rng.uniform(1e-4, 0.3), 3, tf, params.eps_s)
        k, lec = rng.uniform(0, 1), int(rng.integers(0, 10 ** 6))
        assert keyrate.key_length_blocked(params, k, tf, br, lec) == \
            keyrate.key_length(params, k, tf, br, lec)


def test_larger_step_costs_key():
    tf = flat([0.1, 0.4])
    a = SecurityParams(n=1e10)
    b = SecurityParams(n=1e10, s=100)
    br = keyrate.geat_terms(1.001, 3, tf, a.eps_s)
    assert keyrate.key_length_blocked(b, 0.2, tf, br, 0) < keyrate.key_length(a, 0.2, tf, br, 0)


def test_best_alpha_beats_scan(b92_bound):
    lam, c0, nu, h_sv = b92_bound
    params = SecurityParams(n=1e9)
    tf = keyrate.lifted_tradeoff(lam, c0, 0.02)
    lec = keyrate.lambda_ec(params.n, h_sv, 3, params.eps_comp_kv)
    rhs, alpha, _ = keyrate.best_alpha(params, 0.2, tf, 3, lec)
    for a in np.linspace(1.0001, 1.2, 50):
        assert rhs >= keyrate._rhs_for(params, 0.2, tf, 3, lec, a)[0] - 1e-6


def test_lifted_tradeoff_honest_value(b92_bound):
    lam, c0, nu, _ = b92_bound
    gamma = 0.05
    tf = keyrate.lifted_tradeoff(lam, c0, gamma)
    assert tf.labels[-1] == "bot"
    assert tf.value(np.append(gamma * nu, 1 - gamma)) == \
        pytest.approx((1 - gamma) * (lam @ nu + c0), abs=1e-12)


def test_rate_increases_with_block_length(b92_bound):
    lam, c0, nu, h_sv = b92_bound
    rates = []
    for n in (1e8, 1e9, 1e10, 1e12):
        rhs = keyrate.evaluate_b92(lam, c0, nu, h_sv, SecurityParams(n=n))[0]
        rates.append(rhs / n)
    assert all(b > a for a, b in zip(rates, rates[1:]))
    assert rates[-1] < float(lam @ nu + c0 - h_sv)


def test_optimized_rate_is_a_valid_key_length():
    spec = protocol.b92_preset(0.1)
    params = SecurityParams(n=1e9)
    res = keyrate.optimize_keyrate(spec, 0.02, params, solver_budget=40)
    assert res.key_length > 0
    assert res.rate == res.key_length / params.n
    assert res.rate < res.asymptotic_rate
    # the reported length satisfies the inequality with the reported parameters
    rhs = keyrate.key_length_rhs(params, res.plan.k_ca, res.tradeoff, res.breakdown,
                                 res.plan.lambda_ec)
    assert res.key_length <= rhs
