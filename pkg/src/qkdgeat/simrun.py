"""Monte-Carlo runs of the full protocol with real hashing and extraction.

Rounds are sampled i.i.d. from the single-round joint distribution of
Alice's and Bob's data.  Error correction is an oracle (Bob receives Alice's
string) that is charged ``lambda_ec`` leaked bits.  Key validation and
privacy amplification use Toeplitz hashing over GF(2).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve
from scipy.stats import binomtest

from . import keyrate, protocol
from .keyrate import CompletenessPlan, SecurityParams
from .protocol import ProtocolSpec, StatisticsVector
from .tradeoff import TradeoffFunction

MAX_ROUNDS = 10 ** 6
CHUNK = 1 << 16
_FFT_MIN = 4096


class SimError(ValueError):
    pass


# --------------------------------------------------------------------------
# Toeplitz hashing


def _bits(x) -> np.ndarray:
    return np.asarray(x, dtype=np.uint8).ravel() & 1


def _gf2_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer convolution of two 0/1 vectors, exact for any length we allow."""
    if min(a.size, b.size) < _FFT_MIN:
        return np.convolve(a.astype(np.int64), b.astype(np.int64))
    return np.rint(fftconvolve(a.astype(float), b.astype(float))).astype(np.int64)


def toeplitz_hash(x, seed, out_len: int) -> np.ndarray:
    """``T x`` over GF(2) with ``T[i, j] = seed[i - j + m - 1]``.

    The seed must hold ``m + out_len - 1`` bits; extra bits are ignored.
    """
    x, seed = _bits(x), _bits(seed)
    if out_len < 1:
        raise SimError("out_len must be >= 1")
    m = x.size
    need = m + out_len - 1
    if seed.size < need:
        raise SimError(f"seed has {seed.size} bits, Toeplitz diagonal needs {need}")
    if m == 0:
        return np.zeros(out_len, dtype=np.uint8)
    if out_len <= 64:
        # row i of T is seed[i : i + m] reversed; dot products are exact in float64
        sf, xr = seed.astype(float), x[::-1].astype(float)
        rows = [int(round(sf[i:i + m] @ xr)) & 1 for i in range(out_len)]
        return np.array(rows, dtype=np.uint8)
    conv = _gf2_conv(seed[:need], x)
    return (conv[m - 1:m - 1 + out_len] & 1).astype(np.uint8)


def toeplitz_hash_batch(xs: np.ndarray, seeds: np.ndarray, out_len: int) -> np.ndarray:
    """Row-wise :func:`toeplitz_hash` for short inputs (``xs`` is ``N x m``)."""
    xs = np.asarray(xs, dtype=np.uint8) & 1
    seeds = np.asarray(seeds, dtype=np.uint8) & 1
    m = xs.shape[1]
    if seeds.shape[1] < m + out_len - 1:
        raise SimError("seed too short for the Toeplitz diagonal")
    win = sliding_window_view(seeds[:, :m + out_len - 1], m, axis=1)[:, :, ::-1]
    return (np.einsum("nij,nj->ni", win, xs, dtype=np.int64) & 1).astype(np.uint8)


def toeplitz_extract(raw, seed, out_len: int) -> np.ndarray:
    """Extract ``out_len`` bits from ``raw`` with an equally long seed.

    Uses the modified Toeplitz family ``[T | 1] raw`` with ``T`` of size
    ``out_len x (m - out_len)``, which is 2-universal and needs only ``m - 1``
    seed bits; the last seed bit is unused.
    """
    raw, seed = _bits(raw), _bits(seed)
    m = raw.size
    if seed.size != m:
        raise SimError(f"seed length {seed.size} != input length {m}")
    if not 0 <= out_len <= m:
        raise SimError(f"out_len={out_len} outside [0, {m}]")
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)
    head, tail = raw[:m - out_len], raw[m - out_len:]
    if head.size == 0:
        return tail.copy()
    return toeplitz_hash(head, seed[:m - 1], out_len) ^ tail


def toeplitz_extract_batch(raws: np.ndarray, seeds: np.ndarray, out_len: int) -> np.ndarray:
    """Row-wise :func:`toeplitz_extract` for short inputs."""
    raws = np.asarray(raws, dtype=np.uint8) & 1
    m = raws.shape[1]
    if out_len == 0:
        return np.zeros((raws.shape[0], 0), dtype=np.uint8)
    if out_len == m:
        return raws.copy()
    head = toeplitz_hash_batch(raws[:, :m - out_len], np.asarray(seeds)[:, :m - 1], out_len)
    return head ^ raws[:, m - out_len:]


# --------------------------------------------------------------------------
# configuration and transcripts


@dataclass(frozen=True)
class RunConfig:
    """One protocol execution.

    ``joint`` optionally replaces the depolarized honest channel by any
    single-round distribution over ``(u, v)``; ``flip_rate`` flips bits of
    Bob's corrected string after error correction (fault injection).
    """

    spec: ProtocolSpec
    n: int
    p: float
    plan: CompletenessPlan
    params: SecurityParams
    tradeoff: TradeoffFunction
    key_length: int
    seed: int = 0
    flip_rate: float = 0.0
    joint: Optional[Dict] = None

    def __post_init__(self):
        if self.n < 1:
            raise SimError("n must be >= 1")
        if self.n > MAX_ROUNDS:
            raise SimError(f"n={self.n} exceeds the simulator guard {MAX_ROUNDS}")
        if self.key_length < 0:
            raise SimError("key_length must be >= 0")
        if tuple(self.tradeoff.labels) != tuple(self.spec.c_labels):
            raise SimError("tradeoff labels do not match the statistics alphabet")


@dataclass
class Transcript:
    freq_c: StatisticsVector
    kv_pass: bool
    stat_pass: bool
    key_a: Optional[np.ndarray]
    key_b: Optional[np.ndarray]
    leaked_bits: int
    leakage: Dict = field(default_factory=dict)
    ca_value: float = float("nan")
    mismatch: bool = False

    @property
    def aborted(self) -> bool:
        return not (self.kv_pass and self.stat_pass)

    def summary(self, unsafe_keys: bool = False) -> dict:
        d = {"freq_c": self.freq_c.probs, "kv_pass": self.kv_pass, "stat_pass": self.stat_pass,
             "leaked_bits": self.leaked_bits, "leakage": self.leakage, "ca_value": self.ca_value,
             "key_length": 0 if self.key_a is None else int(self.key_a.size)}
        if unsafe_keys and self.key_a is not None:
            d["key_a"] = "".join(map(str, self.key_a))
            d["key_b"] = "".join(map(str, self.key_b))
        return d


def symbol_width(spec: ProtocolSpec) -> int:
    """Bits per S symbol in the fixed-width encoding (declaration order)."""
    return max(1, math.ceil(math.log2(len(spec.s_labels))))


def encode_symbols(idx: np.ndarray, width: int) -> np.ndarray:
    """Big-endian fixed-width binary encoding of symbol indices."""
    shifts = np.arange(width - 1, -1, -1)
    return ((np.asarray(idx)[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def _stream(seed: int, index: int) -> np.random.Generator:
    # counter-based generator; the key pair (seed, index) names an independent stream
    return np.random.Generator(np.random.Philox(key=[seed & (2 ** 64 - 1), index]))


def _round_tables(spec: ProtocolSpec, joint: Dict):
    pairs = [(u, v) for u in spec.u_labels for v in spec.v_labels]
    probs = np.array([joint.get(k, 0.0) for k in pairs], dtype=float)
    if probs.sum() <= 0:
        raise SimError("single-round distribution is empty")
    probs = probs / probs.sum()
    s_idx, c_idx = [], []
    for u, v in pairs:
        i = spec.pd_table[(u, v)]
        s = spec.rk_table[(u, i)]
        s_idx.append(spec.s_labels.index(s))
        c_idx.append(spec.c_labels.index(spec.ev_table[(v, i, s)]))
    return probs, np.array(s_idx), np.array(c_idx)


def sample_rounds(config: RunConfig):
    """Sample ``n`` rounds; chunk ``k`` of ``CHUNK`` rounds uses stream ``k``.

    :returns: ``(s_idx, c_idx)`` arrays of length ``n``
    """
    spec = config.spec
    joint = config.joint
    if joint is None:
        joint = protocol.joint_uv(spec, protocol.honest_state(spec, config.p))
    probs, s_of, c_of = _round_tables(spec, joint)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    out = []
    for k in range(0, config.n, CHUNK):
        size = min(CHUNK, config.n - k)
        u = _stream(config.seed, k // CHUNK).random(size)
        out.append(np.searchsorted(cdf, u, side="right"))
    idx = np.concatenate(out)
    return s_of[idx], c_of[idx]


def run_protocol(config: RunConfig) -> Transcript:
    """Execute data generation through privacy amplification once."""
    spec, plan, params = config.spec, config.plan, config.params
    s_idx, c_idx = sample_rounds(config)
    counts = np.bincount(c_idx, minlength=len(spec.c_labels))
    freq = StatisticsVector(tuple(spec.c_labels), counts / config.n)

    # the public-randomness stream sits after every round stream
    pub = _stream(config.seed, 2 ** 63)
    width = symbol_width(spec)
    s_a = encode_symbols(s_idx, width)
    s_b = s_a.copy()  # error-correction oracle
    if config.flip_rate > 0:
        s_b ^= (pub.random(s_b.size) < config.flip_rate).astype(np.uint8)

    m = s_a.size
    hash_len = math.ceil(math.log2(1.0 / params.eps_kv))
    kv_seed = pub.integers(0, 2, m + hash_len - 1, dtype=np.uint8)
    kv_pass = bool(np.array_equal(toeplitz_hash(s_a, kv_seed, hash_len),
                                  toeplitz_hash(s_b, kv_seed, hash_len)))
    ca = config.tradeoff.value(freq)
    stat_pass = bool(ca >= plan.k_ca)
    leakage = {"lambda_ec": int(plan.lambda_ec), "kv_hash": hash_len,
               "kv_seed": int(kv_seed.size), "pa_seed": 0}
    key_a = key_b = None
    mismatch = bool(np.any(s_a != s_b))
    if kv_pass and stat_pass:
        l = min(config.key_length, m)
        pa_seed = pub.integers(0, 2, m, dtype=np.uint8)
        leakage["pa_seed"] = m
        key_a = toeplitz_extract(s_a, pa_seed, l)
        key_b = toeplitz_extract(s_b, pa_seed, l)
    return Transcript(freq_c=freq, kv_pass=kv_pass, stat_pass=stat_pass, key_a=key_a,
                      key_b=key_b, leaked_bits=sum(leakage.values()), leakage=leakage,
                      ca_value=ca, mismatch=mismatch)


# --------------------------------------------------------------------------
# completeness


@dataclass(frozen=True)
class CompletenessReport:
    trials: int
    aborts: int
    kv_aborts: int
    stat_aborts: int
    frequency: float
    wilson_low: float
    wilson_high: float
    undetected_mismatches: int
    key_disagreements: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def trial_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1, np.uint64)[0])


def wilson_interval(k: int, n: int, level: float = 0.95):
    ci = binomtest(k, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def empirical_completeness(config: RunConfig, trials: int, threads: int = 1) -> CompletenessReport:
    """Abort frequency over ``trials`` independent runs with a 95% Wilson interval.

    Trial ``t`` uses seed ``trial_seed(config.seed, t)``, so the report does not
    depend on ``threads``.
    """
    if trials < 1:
        raise SimError("trials must be >= 1")

    def one(t):
        tr = run_protocol(replace(config, seed=trial_seed(config.seed, t)))
        disagree = tr.key_a is not None and not np.array_equal(tr.key_a, tr.key_b)
        return (not tr.kv_pass, not tr.stat_pass, tr.aborted,
                tr.mismatch and tr.kv_pass, disagree)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(one, range(trials)))
    else:
        rows = [one(t) for t in range(trials)]
    arr = np.array(rows, dtype=bool)
    aborts = int(arr[:, 2].sum())
    lo, hi = wilson_interval(aborts, trials)
    return CompletenessReport(trials=trials, aborts=aborts, kv_aborts=int(arr[:, 0].sum()),
                              stat_aborts=int(arr[:, 1].sum()), frequency=aborts / trials,
                              wilson_low=lo, wilson_high=hi,
                              undetected_mismatches=int(arr[:, 3].sum()),
                              key_disagreements=int(arr[:, 4].sum()))


def b92_config(p: float, n: int, params: SecurityParams, gamma: float = 0.1,
                seed: int = 0, **kw) -> RunConfig:
    """Desk-scale B92 run whose plan follows the finite-size formulas at ``n``.

    The bound is the asymptotically tuned one at noise ``p``, lifted at the
    preset's testing probability ``gamma``.
    """
    spec = protocol.b92_preset(gamma)
    _, lam, c0 = keyrate.asymptotic_rate(spec, p)
    nu, h_sv = keyrate.b92_honest_test(spec, p)
    tf = keyrate.lifted_tradeoff(lam, c0, gamma)
    params = replace(params, n=n)
    ca_hon = (1 - gamma) * float(lam @ nu + c0)
    k_ca, delta = keyrate.threshold_k_ca(ca_hon, tf, n, params.eps_comp_ev, params.eps_kv)
    d_a = len(spec.s_labels)
    lec = keyrate.lambda_ec(n, h_sv, d_a, params.eps_comp_kv)
    rhs, _, _ = keyrate.best_alpha(params, k_ca, tf, d_a, lec)
    l = max(int(math.floor(rhs)), 0)
    kw.setdefault("joint", protocol.joint_uv(spec, protocol.honest_state(spec, p)))
    kw.setdefault("key_length", l)
    return RunConfig(spec=spec, n=n, p=p, plan=CompletenessPlan(lec, k_ca, delta), params=params,
                     tradeoff=tf, seed=seed, **kw)


def summary_json(report: CompletenessReport, extra: Optional[dict] = None) -> str:
    d = report.to_dict()
    if extra:
        d.update(extra)
    return json.dumps(d, sort_keys=True, indent=2)
