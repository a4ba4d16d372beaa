"""Finite-size key lengths from an affine min-tradeoff function.

The key length is the largest integer below the GEAT-based display; the
blocked variant tolerates up to ``s`` in-flight signals.  Completeness fixes
the error-correction leakage and the statistical threshold, and the testing
probability γ and Rényi parameter α are optimized numerically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from . import protocol, tradeoff
from .protocol import ProtocolSpec
from .tradeoff import TradeoffFunction

LN2 = math.log(2.0)
ALPHA_LO = 1.0 + 1e-9
ALPHA_HI = 1.5 - 1e-9
GAMMA_GRID = tuple(0.00125 * 2 ** k for k in range(10))  # 0.00125 ... 0.64


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SecurityParams:
    n: float
    eps_s: float = 2e-10
    eps_a: float = 4e-10
    eps_pa: float = 1e-10
    eps_kv: float = 5e-11
    eps_comp_kv: float = 5e-3
    eps_comp_ev: float = 5e-3
    s: int = 1

    def __post_init__(self):
        for name in ("eps_s", "eps_a", "eps_pa", "eps_kv", "eps_comp_kv", "eps_comp_ev"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ParameterError(f"{name}={v} outside (0, 1)")
        if self.n < 1:
            raise ParameterError("n must be at least 1")
        if int(self.s) != self.s or self.s < 1:
            raise ParameterError("step size s must be a positive integer")
        if self.eps_comp_ev <= self.eps_kv:
            raise ParameterError("eps_comp_ev must exceed eps_kv")

    @property
    def eps_cor(self) -> float:
        return self.eps_kv

    @property
    def eps_sec(self) -> float:
        return max(self.eps_pa + 4 * self.eps_s, 2 * self.eps_a) + 2 * self.eps_kv


@dataclass(frozen=True)
class GeatBreakdown:
    alpha: float
    g_eps: float
    v_term: float
    kprime: float
    d_a: int


@dataclass(frozen=True)
class CompletenessPlan:
    lambda_ec: int
    k_ca: float
    delta: float


@dataclass
class KeyRateResult:
    key_length: int
    rate: float
    plan: CompletenessPlan
    breakdown: GeatBreakdown
    gamma: float
    eps_cor: float
    eps_sec: float
    tradeoff: Optional[TradeoffFunction] = None
    asymptotic_rate: float = float("nan")
    context: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# scalar building blocks


def g_of_eps(eps: float) -> float:
    """``-log2(1 - sqrt(1 - eps^2))`` evaluated without cancellation."""
    return -math.log2(eps * eps / (1.0 + math.sqrt(1.0 - eps * eps)))


def geat_terms(alpha: float, d_a: int, tf: TradeoffFunction, eps: float) -> GeatBreakdown:
    """Second-order GEAT constants for Rényi parameter ``alpha``."""
    if not 1.0 < alpha < 1.5:
        raise ParameterError(f"alpha={alpha} outside (1, 1.5)")
    v = math.log2(2 * d_a ** 2 + 1) + math.sqrt(2 + tf.var_ub)
    expo = 2 * math.log2(d_a) + tf.max_val - tf.min_sigma_lb
    a1 = (alpha - 1) / (2 - alpha)
    pre = (2 - alpha) ** 3 / (6 * (3 - 2 * alpha) ** 3 * LN2)
    # ln(2^x + e^2) computed stably for large x
    lnterm = expo * LN2 + math.log1p(math.exp(2.0 - expo * LN2)) if expo * LN2 > 2 else \
        math.log(2.0 ** expo + math.e ** 2)
    kprime = pre * 2.0 ** (a1 * expo) * lnterm ** 3
    return GeatBreakdown(alpha=alpha, g_eps=g_of_eps(eps), v_term=v, kprime=kprime, d_a=d_a)


def _ceil_log2_inv(eps: float) -> int:
    return math.ceil(math.log2(1.0 / eps))


def key_length_rhs(params: SecurityParams, k_ca: float, tf: TradeoffFunction,
                   breakdown: GeatBreakdown, lambda_ec: int) -> float:
    """Real-valued right-hand side of the (unblocked) key-length inequality."""
    n, a = params.n, breakdown.alpha
    a1 = (a - 1) / (2 - a)
    return (n * k_ca
            - n * a1 * (LN2 / 2) * breakdown.v_term ** 2
            - (breakdown.g_eps + a * math.log2(1 / params.eps_a)) / (a - 1)
            - n * a1 ** 2 * breakdown.kprime
            - math.ceil(2 * math.log2(1 / params.eps_pa))
            - _ceil_log2_inv(params.eps_kv)
            - lambda_ec)


def key_length_blocked_rhs(params: SecurityParams, k_ca: float, tf: TradeoffFunction,
                           breakdown: GeatBreakdown, lambda_ec: int) -> float:
    """Right-hand side with step size ``s`` and ``eps' = eps_s / (3s - 2)``."""
    n, a, s = params.n, breakdown.alpha, int(params.s)
    a1 = (a - 1) / (2 - a)
    g1 = g_of_eps(params.eps_s / (3 * s - 2))
    return (n * k_ca
            - n * a1 * (LN2 / 2) * breakdown.v_term ** 2
            - s * ((g1 + a * math.log2(1 / params.eps_a)) / (a - 1))
            - n * a1 ** 2 * breakdown.kprime
            - (s - 1) * g1
            - math.ceil(2 * math.log2(1 / params.eps_pa))
            - _ceil_log2_inv(params.eps_kv)
            - lambda_ec)


def _floor_len(x: float) -> int:
    return int(math.floor(x)) if math.isfinite(x) else 0


def key_length(params: SecurityParams, k_ca: float, tf: TradeoffFunction,
               breakdown: GeatBreakdown, lambda_ec: int) -> int:
    """Largest integer ``l`` satisfying the key-length inequality (may be <= 0)."""
    return _floor_len(key_length_rhs(params, k_ca, tf, breakdown, lambda_ec))


def key_length_blocked(params: SecurityParams, k_ca: float, tf: TradeoffFunction,
                       breakdown: GeatBreakdown, lambda_ec: int) -> int:
    """Blocked key length; identical to ``key_length`` when ``s = 1``."""
    return _floor_len(key_length_blocked_rhs(params, k_ca, tf, breakdown, lambda_ec))


def lambda_ec(n: float, h_sv: float, s_alphabet_size: int, eps_comp_kv: float) -> int:
    """Error-correction leakage that keeps the key-validation abort below ``eps_comp_kv``."""
    if not 0.0 < eps_comp_kv < 1.0:
        raise ParameterError("eps_comp_kv outside (0, 1)")
    val = (n * h_sv
           + 2 * math.sqrt(n) * math.sqrt(1 - 2 * math.log2(eps_comp_kv / 2))
           * math.log2(1 + 2 * s_alphabet_size)
           + 2 * math.log2(2 / eps_comp_kv))
    return int(math.ceil(val))


def threshold_k_ca(ca_hon: float, tf: TradeoffFunction, n: float, eps_comp_ev: float,
                   eps_kv: float):
    """Statistical-check threshold ``k_ca = CA(nu_hon) - delta``.

    :returns: ``(k_ca, delta)``
    """
    if eps_comp_ev <= eps_kv:
        raise ParameterError("eps_comp_ev must exceed eps_kv")
    spread = tf.max_val - tf.min_val
    inner = (2 * spread * ca_hon + 6 * tf.var_ub) / (3 * n) * math.log2(1 / (eps_comp_ev - eps_kv))
    delta = math.sqrt(max(inner, 0.0))
    return ca_hon - delta, delta


def bernstein_abort(delta: float, n: float, tf: TradeoffFunction) -> float:
    """Bernstein bound on the honest abort probability of the statistical check."""
    if delta < 0:
        raise ParameterError("delta must be non-negative")
    denom = tf.var_ub + (tf.max_val - tf.min_val) * delta / 3
    if delta == 0:
        return 1.0
    if denom <= 0:
        return 0.0
    return math.exp(-n * (delta ** 2 / 2) / denom)


# --------------------------------------------------------------------------
# α and γ search


def _rhs_for(params, k_ca, tf, d_a, lec, alpha):
    eps = params.eps_s / (3 * params.s - 2)
    br = geat_terms(alpha, d_a, tf, eps)
    if params.s == 1:
        return key_length_rhs(params, k_ca, tf, br, lec), br
    return key_length_blocked_rhs(params, k_ca, tf, br, lec), br


def best_alpha(params: SecurityParams, k_ca: float, tf: TradeoffFunction, d_a: int,
               lec: int, scan: int = 200):
    """Golden-section search for α, guarded by a dense scan.

    :returns: ``(rhs, alpha, breakdown)`` for the best α found.
    """
    f = lambda a: -_rhs_for(params, k_ca, tf, d_a, lec, a)[0]
    # search in log(alpha - 1) so that alpha near 1 is resolved
    lo, hi = math.log(ALPHA_LO - 1), math.log(ALPHA_HI - 1)
    res = minimize_scalar(lambda t: f(1 + math.exp(t)), bounds=(lo, hi), method="bounded",
                          options=dict(xatol=1e-10))
    cands = [1 + math.exp(float(res.x))]
    grid = 1 + np.exp(np.linspace(lo, hi, scan))
    vals = [f(a) for a in grid]
    k = int(np.argmin(vals))
    if vals[k] < f(cands[0]):
        lo2 = math.log(grid[max(k - 1, 0)] - 1)
        hi2 = math.log(grid[min(k + 1, scan - 1)] - 1)
        r2 = minimize_scalar(lambda t: f(1 + math.exp(t)), bounds=(lo2, hi2), method="bounded",
                             options=dict(xatol=1e-12))
        cands += [float(grid[k]), 1 + math.exp(float(r2.x))]
    a = min(cands, key=f)
    rhs, br = _rhs_for(params, k_ca, tf, d_a, lec, a)
    return rhs, a, br


def lifted_tradeoff(lam_prime: np.ndarray, c0: float, gamma: float) -> TradeoffFunction:
    """CA over (fail, inc, empty, bot) from the γ-free offset ``c0``."""
    vals = (1 - gamma) * (np.asarray(lam_prime, dtype=float) + c0)
    g = tradeoff.generic_tradeoff(tradeoff.TEST_LABELS_B92, vals, 0.0)
    return tradeoff.lift_test_data(g, gamma)


def evaluate_b92(lam_prime, c0: float, nu_test: np.ndarray, h_sv: float,
                 params: SecurityParams, gammas: Sequence[float] = GAMMA_GRID, d_a: int = 3,
                 refine: bool = False):
    """Best key length over γ (and α) for a fixed γ-free bound ``(lam', c0)``.

    With ``refine`` the best grid γ is polished by a bounded search in log γ
    between its grid neighbours.
    """
    lam_prime = np.asarray(lam_prime, dtype=float)
    g0_hon = float(lam_prime @ nu_test + c0)
    lec = lambda_ec(params.n, h_sv, d_a, params.eps_comp_kv)

    def at(gamma):
        tf = lifted_tradeoff(lam_prime, c0, gamma)
        ca_hon = (1 - gamma) * g0_hon
        k_ca, delta = threshold_k_ca(ca_hon, tf, params.n, params.eps_comp_ev, params.eps_kv)
        rhs, alpha, br = best_alpha(params, k_ca, tf, d_a, lec)
        return (rhs, gamma, tf, CompletenessPlan(lec, k_ca, delta), br)

    grid = sorted(gammas)
    found = [at(g) for g in grid]
    k = int(np.argmax([b[0] for b in found]))
    best = found[k]
    if refine and len(grid) > 1:
        lo = math.log(grid[max(k - 1, 0)])
        hi = math.log(min(grid[min(k + 1, len(grid) - 1)], 0.999))
        if hi > lo:
            res = minimize_scalar(lambda t: -at(math.exp(t))[0], bounds=(lo, hi),
                                  method="bounded", options=dict(xatol=1e-4))
            cand = at(math.exp(float(res.x)))
            if cand[0] > best[0]:
                best = cand
    return best


def _result(best, params: SecurityParams, asym: float, ctx: dict) -> KeyRateResult:
    rhs, gamma, tf, plan, br = best
    l = max(_floor_len(rhs), 0)
    return KeyRateResult(key_length=l, rate=l / params.n, plan=plan, breakdown=br,
                         gamma=gamma, eps_cor=params.eps_cor, eps_sec=params.eps_sec,
                         tradeoff=tf, asymptotic_rate=asym, context=ctx)


def b92_honest_test(spec: ProtocolSpec, p: float):
    stats, h_sv = protocol.honest_model(spec, p)
    nu = np.array([stats[c] for c in tradeoff.TEST_LABELS_B92]) / spec.gamma
    return nu / nu.sum(), h_sv


def asymptotic_rate(spec: ProtocolSpec, p: float, cap: float = 1000.0):
    """``CA(nu_hon) - H(S|VI)`` in the γ -> 0 limit with a tuned λ.

    :returns: ``(rate, lam', certified c0)``
    """
    ops = protocol.source_replacement(spec)
    nu, h_sv = b92_honest_test(spec, p)
    lam = tradeoff.heuristic_lambda(ops, nu, reduced=True, cap=cap, data_weight=1.0)
    c0, _ = tradeoff.certified_c_reduced(ops, lam, data_weight=1.0)
    return float(lam @ nu + c0 - h_sv), lam, c0


def optimize_keyrate(spec: ProtocolSpec, p: float, params: SecurityParams,
                     solver_budget: int = 120, gammas: Sequence[float] = GAMMA_GRID,
                     lam_start: Optional[np.ndarray] = None) -> KeyRateResult:
    """Optimize λ', γ and α for the finite-size key rate of ``spec`` at noise ``p``.

    B92 specs use the reduced data-round program and the test/data lifting;
    other specs use the full program at their own γ.
    """
    if spec.name != "b92":
        return _optimize_generic(spec, p, params, solver_budget)
    ops = protocol.source_replacement(spec)
    nu, h_sv = b92_honest_test(spec, p)
    d_a = len(spec.s_labels)
    asym, lam_asym, _ = asymptotic_rate(spec, p)
    state = {"y": None}

    def score(x):
        lam = np.array([x[0], x[1], 0.0])
        c0, _, y = tradeoff.upper_c_reduced(ops, lam, data_weight=1.0, y0=state["y"])
        state["y"] = y
        best = evaluate_b92(lam, c0, nu, h_sv, params, gammas, d_a)
        return -best[0] / params.n

    starts = [lam_asym[:2] * sc for sc in (1.0, 0.3, 0.1, 0.03, 0.01)]
    starts += [np.array([a, b]) for a in -np.geomspace(0.1, 30.0, 10)
               for b in np.linspace(-4.0, 1.0, 8)]
    if lam_start is not None:
        starts.insert(0, np.asarray(lam_start, dtype=float)[:2])
    scored = sorted(((score(x), i) for i, x in enumerate(starts)))
    x0 = starts[scored[0][1]]
    state["y"] = None
    simplex = np.array([x0, x0 + np.array([0.2 * abs(x0[0]) + 0.1, 0.0]),
                        x0 + np.array([0.0, 0.2 * abs(x0[1]) + 0.1])])
    res = minimize(score, x0, method="Nelder-Mead",
                   options=dict(maxfev=solver_budget, xatol=1e-4, fatol=1e-10,
                                initial_simplex=simplex))
    lam = np.array([res.x[0], res.x[1], 0.0])
    c0, rep = tradeoff.certified_c_reduced(ops, lam, data_weight=1.0)
    best = evaluate_b92(lam, c0, nu, h_sv, params, gammas, d_a, refine=True)
    ctx = {"lam_prime": lam.tolist(), "c0": c0, "solver_gap": rep.gap, "h_sv": h_sv,
           "nelder_mead_evals": int(res.nfev)}
    return _result(best, params, asym, ctx)


def _optimize_generic(spec: ProtocolSpec, p: float, params: SecurityParams, budget: int):
    ops = protocol.source_replacement(spec)
    stats, h_sv = protocol.honest_model(spec, p)
    lam = tradeoff.heuristic_lambda(ops, stats)
    c, rep = tradeoff.certified_c_lambda(ops, lam)
    tf = tradeoff.generic_tradeoff(spec.c_labels, lam, c)
    ca_hon = tf.value(stats)
    d_a = len(spec.s_labels)
    lec = lambda_ec(params.n, h_sv, d_a, params.eps_comp_kv)
    k_ca, delta = threshold_k_ca(ca_hon, tf, params.n, params.eps_comp_ev, params.eps_kv)
    rhs, alpha, br = best_alpha(params, k_ca, tf, d_a, lec)
    best = (rhs, spec.gamma, tf, CompletenessPlan(lec, k_ca, delta), br)
    return _result(best, params, ca_hon - h_sv, {"lam": lam.tolist(), "c": c, "solver_gap": rep.gap})
