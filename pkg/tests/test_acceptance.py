"""Acceptance checks; each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
"""
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from qkdgeat import decoy, keyrate, protocol, qcore, simrun, tradeoff
from qkdgeat.keyrate import SecurityParams

TOL_RATE = 5e-3


def _b92_ops():
    spec = protocol.b92_preset(0.1)
    return spec, protocol.source_replacement(spec)


def criterion_1():
    spec, ops = _b92_ops()
    ref = {0.0: 0.249999, 0.0263: 0.111576, 0.05: 0.055253, 0.0763: 0.015191}
    worst_dev, worst_excess, parts = 0.0, -np.inf, []
    start = time.time()
    for p, target in ref.items():
        rate, lam, c0 = keyrate.asymptotic_rate(spec, p)
        nu, h_sv = keyrate.b92_honest_test(spec, p)
        upper = float(lam @ nu + tradeoff.upper_c_reduced(ops, lam, data_weight=1.0)[0] - h_sv)
        worst_dev = max(worst_dev, abs(rate - target))
        worst_excess = max(worst_excess, rate - upper)
        parts.append(f"p={p}: {rate:.6f} (ref {target})")
    elapsed = time.time() - start
    ok = worst_dev <= TOL_RATE and worst_excess <= 1e-6 and elapsed <= 3600
    return ok, (f"{'; '.join(parts)}; max |dev| {worst_dev:.2e} <= {TOL_RATE}, "
                f"certified - primal {worst_excess:.1e} <= 1e-6, {elapsed:.0f}s")


def criterion_2():
    spec = protocol.b92_preset(0.1)
    ref = {1e7: 0.072869, 1e9: 0.181370, 1e11: 0.230256, 1e15: 0.248736}
    rates, parts = [], []
    asym = None
    for n, target in ref.items():
        res = keyrate.optimize_keyrate(spec, 0.0, SecurityParams(n=n))
        rates.append(res.rate)
        asym = res.asymptotic_rate
        parts.append(f"n={n:.0e}: {res.rate:.6f} (ref {target}, dev {res.rate - target:+.2e})")
    close = all(abs(r - t) <= TOL_RATE for r, t in zip(rates, ref.values()))
    chain = rates + [asym]
    ordered = all(a < b for a, b in zip(chain, chain[1:]))
    return close and ordered, f"{'; '.join(parts)}; strict ordering up to asymptotic {asym:.6f}: {ordered}"


def criterion_3():
    spec = protocol.b92_preset(0.1)
    cases = [((10, 1e15), 0.247123), ((10 ** 4, 1e10), 0.012496)]
    parts, close = [], True
    for (s, n), target in cases:
        res = keyrate.optimize_keyrate(spec, 0.0, SecurityParams(n=n, s=s))
        close &= abs(res.rate - target) <= TOL_RATE
        parts.append(f"s={s}, n={n:.0e}: {res.rate:.6f} (ref {target}, dev {res.rate - target:+.2e})")
    rng = np.random.default_rng(2024)
    same = 0
    for _ in range(50):
        k = int(rng.integers(2, 5))
        tf = tradeoff.generic_tradeoff(tuple(f"c{i}" for i in range(k)), rng.uniform(-3, 3, k),
                                       rng.uniform(-1, 1))
        params = SecurityParams(n=float(10 ** rng.uniform(3, 16)),
                                eps_s=float(10 ** rng.uniform(-12, -3)),
                                eps_a=float(10 ** rng.uniform(-12, -3)),
                                eps_pa=float(10 ** rng.uniform(-12, -3)))
        br = keyrate.geat_terms(float(1 + 10 ** rng.uniform(-6, -0.4)), int(rng.integers(1, 5)), tf,
                                params.eps_s)
        k_ca, lec = float(rng.uniform(0, 1)), int(rng.integers(0, 10 ** 9))
        same += keyrate.key_length_blocked(params, k_ca, tf, br, lec) == \
            keyrate.key_length(params, k_ca, tf, br, lec)
    return close and same == 50, f"{'; '.join(parts)}; s=1 identity {same}/50"


def criterion_4():
    violations, checked, worst = 0, 0, np.inf
    cases = [(name, g) for name in ("b92", "bb84") for g in (0.05, 0.1, 0.3)]
    for seed, (name, gamma) in enumerate(cases):
        spec = protocol.PRESETS[name](gamma)
        ops = protocol.source_replacement(spec)
        stats, _ = protocol.honest_model(spec, 0.02)
        lam = tradeoff.heuristic_lambda(ops, stats)
        c, rep = tradeoff.certified_c_lambda(ops, lam)
        rng = np.random.default_rng(400 + seed)
        for _ in range(100):
            psi = protocol.random_feasible_state(ops, rng)
            h = protocol.conditional_entropy_sic(ops, psi)
            margin = h - (lam @ protocol.statistics(ops, psi).values + c)
            worst = min(worst, margin)
            violations += margin < -1e-7
            checked += 1
    spec, ops = _b92_ops()
    stats, _ = protocol.honest_model(spec, 0.02)
    lam = tradeoff.heuristic_lambda(ops, stats)
    _, fw = tradeoff.frank_wolfe(ops, lam, tol=1e-3, max_iter=10_000)
    ok = violations == 0 and fw.gap <= 1e-3
    return ok, (f"{violations} violations in {checked} states (min margin {worst:.3e}); "
                f"Frank-Wolfe gap {fw.gap:.2e} after {fw.iterations} iterations")


def _coles_gap(ops, psi):
    direct = protocol.conditional_entropy_sic(ops, psi)
    ns = len(ops.s_labels)
    if ops.dim * ns * len(ops.i_labels) * len(ops.c_labels) <= qcore.MAX_DIM:
        full = protocol.nu1(ops, psi)
        layout = (ops.dim, ns, len(ops.i_labels), len(ops.c_labels))
        via = qcore.relative_entropy(full, qcore.pinch(full, layout, 1))
    else:
        # nu1 is block diagonal in (i, c); its relative entropy is the sum over blocks
        via = sum(qcore.relative_entropy(b, qcore.pinch(b, (ops.dim, ns), 1))
                  for b in protocol.nu1_blocks(ops, psi).values())
    return abs(via - direct)


def criterion_5():
    worst, parts = 0.0, []
    for name in ("b92", "bb84"):
        ops = protocol.source_replacement(protocol.PRESETS[name](0.1))
        rng = np.random.default_rng(5)
        w = max(_coles_gap(ops, protocol.random_feasible_state(ops, rng)) for _ in range(100))
        worst = max(worst, w)
        parts.append(f"{name} max deviation {w:.1e}")
    return worst <= 1e-8, f"{', '.join(parts)} over 100 states each (tol 1e-8)"


def _random_settings(rng):
    m3 = float(rng.choice([0.0, rng.uniform(0, 0.05)]))
    m2 = m3 + float(rng.uniform(0.02, 0.3))
    m1 = m2 + m3 + float(rng.uniform(0.05, 0.8))
    p = rng.dirichlet(np.ones(3))
    p = np.clip(p, 1e-3, None)
    p = tuple(float(x) for x in p / p.sum())
    return decoy.DecoySettings((m1, m2, m3), (p[0], p[1], 1.0 - p[0] - p[1]))


def criterion_6(tol=1e-12):
    rng = np.random.default_rng(6)
    start = time.time()
    bad = 0
    for _ in range(1000):
        st = _random_settings(rng)
        ch = decoy.random_channel(rng)
        g = decoy.mixture_gains(ch, st)
        t0 = decoy.bound_t0(g, st, "X")
        t1 = decoy.bound_t1(g, st, t0, "X")
        f1 = decoy.bound_f1(g, st, "Z")
        bad += t0 > ch.t_s[("X", 0)] + tol
        bad += t1 > ch.t_s[("X", 1)] + tol
        bad += f1 < ch.f_s[("Z", 1)] - tol
        bad += decoy.decoy_entropy_bound(g, st) > decoy.photon_resolved_entropy(ch, st) + tol
    elapsed = time.time() - start
    return bad == 0 and elapsed <= 60, f"{bad} violations over 1000 channels (tol {tol}), {elapsed:.1f}s"


def criterion_7():
    rng = np.random.default_rng(7)
    pairs, m, out = 10 ** 6, 32, 16
    collisions = 0
    for _ in range(pairs // 50_000):
        x = rng.integers(0, 2, (50_000, m), dtype=np.uint8)
        y = rng.integers(0, 2, (50_000, m), dtype=np.uint8)
        same = (x == y).all(axis=1)
        while same.any():
            y[same] = rng.integers(0, 2, (int(same.sum()), m), dtype=np.uint8)
            same = (x == y).all(axis=1)
        seeds = rng.integers(0, 2, (50_000, m + out - 1), dtype=np.uint8)
        hx = simrun.toeplitz_hash_batch(x, seeds, out)
        hy = simrun.toeplitz_hash_batch(y, seeds, out)
        collisions += int((hx == hy).all(axis=1).sum())
    p = 2.0 ** -out
    limit = pairs * p + 5 * np.sqrt(pairs * p * (1 - p))
    samples, raw_len, l = 10 ** 5, 20, 8
    raws = rng.integers(0, 2, (samples, raw_len), dtype=np.uint8)
    seeds = rng.integers(0, 2, (samples, raw_len), dtype=np.uint8)
    outs = simrun.toeplitz_extract_batch(raws, seeds, l)
    values = outs @ (1 << np.arange(l - 1, -1, -1))
    pval = chisquare(np.bincount(values, minlength=2 ** l)).pvalue
    ok = collisions <= limit and pval > 1e-3
    return ok, (f"{collisions} collisions in 1e6 pairs (limit {limit:.1f}); "
                f"extractor chi-square p-value {pval:.3f} > 1e-3")


def criterion_8():
    params = SecurityParams(n=10 ** 5)
    planned = simrun.b92_config(0.02, 10 ** 5, params, seed=8)
    # the formula key length is zero at this n; extract anyway so key agreement is exercised
    cfg = replace(planned, key_length=max(planned.key_length, 256))
    rep = simrun.empirical_completeness(cfg, 1000, threads=4)
    budget = params.eps_comp_kv + params.eps_comp_ev
    faulty = replace(cfg, n=200, flip_rate=0.01, seed=80)
    trials = 10 ** 5
    frep = simrun.empirical_completeness(faulty, trials, threads=4)
    q = 2.0 ** -math.ceil(math.log2(1 / params.eps_kv))
    limit = trials * q + 3 * np.sqrt(trials * q)
    ok = (rep.wilson_high <= budget and rep.key_disagreements == 0 and rep.undetected_mismatches == 0
          and frep.undetected_mismatches <= limit)
    return ok, (f"{rep.aborts}/1000 honest aborts, Wilson upper {rep.wilson_high:.2e} <= {budget}, "
                f"{rep.key_disagreements} key disagreements; fault injection {frep.kv_aborts}/{trials} "
                f"caught by key validation, {frep.undetected_mismatches} undetected (limit {limit:.3f}), "
                f"planned key length {planned.key_length}, extracted {cfg.key_length} bits")


def criterion_9(step=1e-5):
    worst = 0.0
    for name in ("b92", "bb84"):
        spec = protocol.PRESETS[name](0.1)
        ops = protocol.source_replacement(spec)
        rng = np.random.default_rng(9)
        lam = rng.normal(size=len(spec.c_labels))
        mixed = qcore.tensor(ops.alice_marginal, np.eye(ops.d_q) / ops.d_q)
        w, v = np.linalg.eigh(ops.alice_marginal)
        keep = np.kron(v[:, w > 1e-12] @ v[:, w > 1e-12].conj().T, np.eye(ops.d_q))
        for _ in range(20):
            psi = 0.9 * protocol.random_feasible_state(ops, rng) + 0.1 * mixed
            _, grad = tradeoff.objective(ops, lam, psi)
            for _ in range(3):
                # stay on the support of Alice's marginal so both stencil points are states
                h = keep @ qcore.random_hermitian(ops.dim, rng) @ keep
                # keep Alice's marginal fixed along the direction
                h = h - qcore.tensor(qcore.partial_trace(h, (ops.d_p, ops.d_q), [0]), np.eye(ops.d_q) / ops.d_q)
                h /= np.linalg.norm(h)
                fp = tradeoff.objective(ops, lam, psi + step * h)[0]
                fm = tradeoff.objective(ops, lam, psi - step * h)[0]
                worst = max(worst, abs((fp - fm) / (2 * step) - np.real(np.trace(grad @ h))))
    return worst <= 1e-5, f"max |FD - gradient| {worst:.2e} <= 1e-5 over 20 points per preset"


CRITERIA = {k: globals()[f"criterion_{k}"] for k in range(1, 10)}


def _line(k, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}"


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k]()
    with capsys.disabled():
        print("\n" + _line(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failures = 0
    for k, fn in CRITERIA.items():
        ok, detail = fn()
        failures += not ok
        print(_line(k, ok, detail), flush=True)
    sys.exit(1 if failures else 0)
