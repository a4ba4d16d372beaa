"""Decoy-state bounds for BB84 with a weak coherent source.

Observed per-intensity detection rates ``t_mu`` and error rates ``f_mu``
(conditioned on the intensity and, for ``f``, on detection) bound the
vacuum and single-photon detection probabilities ``t_0``, ``t_1`` and the
single-photon error rate ``f_1``.  These feed the entropy lower bound
``tau_0 t_0^X + tau_1 t_1^X (1 - h(f_1^Z))`` per sifted X-basis round.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.stats import poisson

from .qcore import binary_entropy

S_MAX = 60
BASES = ("Z", "X")


class DecoyError(ValueError):
    pass


@dataclass(frozen=True)
class DecoySettings:
    """Intensities ``mu = (mu_1, mu_2, mu_3)`` with selection probabilities."""

    mu: Tuple[float, float, float]
    p_mu: Tuple[float, float, float]
    q_x: float = 0.5

    def __post_init__(self):
        m1, m2, m3 = self.mu
        if not (m1 > m2 + m3 and m2 > m3 >= 0):
            raise DecoyError("intensity ordering: need mu1 > mu2 + mu3 and mu2 > mu3 >= 0")
        if any(p < 0 for p in self.p_mu) or abs(sum(self.p_mu) - 1.0) > 1e-12:
            raise DecoyError("intensity probabilities must be non-negative and sum to 1")
        if not 0.0 <= self.q_x <= 1.0:
            raise DecoyError("basis probability outside [0, 1]")


@dataclass(frozen=True)
class ObservedGains:
    """``t_mu[(basis, k)]`` and ``f_mu[(basis, k)]`` for intensity index ``k`` in 1..3."""

    t_mu: Dict
    f_mu: Dict

    def __post_init__(self):
        for name, table in (("t", self.t_mu), ("f", self.f_mu)):
            for key, v in table.items():
                if not 0.0 <= v <= 1.0:
                    raise DecoyError(f"{name}{key}={v} outside [0, 1]")


@dataclass(frozen=True)
class PhotonChannel:
    """Per-photon-number detection ``t_s[(basis, s)]`` and error ``f_s[(basis, s)]``."""

    t_s: Dict
    f_s: Dict


def poisson_weight(s: int, mu: float) -> float:
    """``e^{-mu} mu^s / s!`` (with ``0^0 = 1``)."""
    if s < 0:
        return 0.0
    return float(poisson.pmf(s, mu)) if mu > 0 else float(s == 0)


def tau(settings: DecoySettings, s: int) -> float:
    """Probability that a pulse carries ``s`` photons, mixed over intensities."""
    return sum(p * poisson_weight(s, m) for m, p in zip(settings.mu, settings.p_mu))


def mixture_gains(channel: PhotonChannel, settings: DecoySettings,
                  s_max: int = S_MAX) -> ObservedGains:
    """Forward model: intensity-level rates from photon-number-level rates."""
    t_mu, f_mu = {}, {}
    for k, m in enumerate(settings.mu, start=1):
        tail = float(poisson.sf(s_max, m)) if m > 0 else 0.0
        if tail > 1e-12:
            raise DecoyError(f"Poisson tail {tail:.2e} beyond s_max={s_max} for mu={m}")
        w = np.array([poisson_weight(s, m) for s in range(s_max + 1)])
        for x in BASES:
            ts = np.array([channel.t_s.get((x, s), 0.0) for s in range(s_max + 1)])
            fs = np.array([channel.f_s.get((x, s), 0.0) for s in range(s_max + 1)])
            t = float(w @ ts)
            t_mu[(x, k)] = min(max(t, 0.0), 1.0)
            f_mu[(x, k)] = float(w @ (ts * fs)) / t if t > 0 else 0.0
    return ObservedGains(t_mu, f_mu)


def _check(gains: ObservedGains, settings: DecoySettings, x: str):
    if any(p == 0 for p in settings.p_mu):
        raise DecoyError("every intensity needs a positive selection probability")
    try:
        return [gains.t_mu[(x, k)] for k in (1, 2, 3)], [gains.f_mu[(x, k)] for k in (1, 2, 3)]
    except KeyError as exc:
        raise DecoyError(f"missing observation {exc}") from exc


def bound_t0(gains: ObservedGains, settings: DecoySettings, basis: str = "X") -> float:
    """Lower bound on the vacuum detection probability ``t_0``."""
    (t1, t2, t3), _ = _check(gains, settings, basis)
    _, m2, m3 = settings.mu
    return (m2 * math.exp(m3) * t3 - m3 * math.exp(m2) * t2) / (m2 - m3)


def bound_t1(gains: ObservedGains, settings: DecoySettings, t0_bound: float,
             basis: str = "X") -> float:
    """Lower bound on the single-photon detection probability ``t_1``."""
    (t1, t2, t3), _ = _check(gains, settings, basis)
    m1, m2, m3 = settings.mu
    q = m2 ** 2 - m3 ** 2
    pre = m1 / (m1 * (m2 - m3) - q)
    return pre * (math.exp(m2) * t2 - math.exp(m3) * t3
                  + q / m1 ** 2 * (t0_bound - math.exp(m1) * t1))


def bound_e1(gains: ObservedGains, settings: DecoySettings, basis: str = "Z") -> float:
    """Upper bound on ``t_1 f_1``, the single-photon detect-and-error probability."""
    t, f = _check(gains, settings, basis)
    _, m2, m3 = settings.mu
    return (math.exp(m2) * t[1] * f[1] - math.exp(m3) * t[2] * f[2]) / (m2 - m3)


def bound_f1(gains: ObservedGains, settings: DecoySettings, basis: str = "Z") -> float:
    """Upper bound on the single-photon error rate ``f_1`` (1 when uninformative)."""
    t0 = max(bound_t0(gains, settings, basis), 0.0)
    t1 = bound_t1(gains, settings, t0, basis)
    e1 = max(bound_e1(gains, settings, basis), 0.0)
    if t1 <= 0:
        return 1.0
    return min(e1 / t1, 1.0)


def decoy_entropy_bound(gains: ObservedGains, settings: DecoySettings) -> float:
    """``tau_0 t_0^X + tau_1 t_1^X (1 - h(f_1^Z))`` with clamped bounds."""
    t0 = min(max(bound_t0(gains, settings, "X"), 0.0), 1.0)
    t1 = min(max(bound_t1(gains, settings, t0, "X"), 0.0), 1.0)
    f1 = min(max(bound_f1(gains, settings, "Z"), 0.0), 0.5)
    return tau(settings, 0) * t0 + tau(settings, 1) * t1 * (1.0 - binary_entropy(f1))


def photon_resolved_entropy(channel: PhotonChannel, settings: DecoySettings) -> float:
    """Same expression evaluated on the true photon-number channel (test oracle)."""
    f1 = channel.f_s.get(("Z", 1), 0.0)
    return (tau(settings, 0) * channel.t_s.get(("X", 0), 0.0)
            + tau(settings, 1) * channel.t_s.get(("X", 1), 0.0) * (1.0 - binary_entropy(min(f1, 0.5))))


def random_channel(rng: np.random.Generator, s_max: int = S_MAX) -> PhotonChannel:
    """Random photon-number channel for dominance checks."""
    t_s, f_s = {}, {}
    for x in BASES:
        for s in range(s_max + 1):
            t_s[(x, s)] = float(rng.uniform())
            f_s[(x, s)] = float(rng.uniform(0.0, 0.5))
    return PhotonChannel(t_s, f_s)


def _vector(gains: ObservedGains) -> np.ndarray:
    return np.array([gains.t_mu[("X", k)] for k in (1, 2, 3)] + [gains.f_mu[("Z", k)] for k in (1, 2, 3)]
                    + [gains.t_mu[("Z", k)] for k in (1, 2, 3)])


def _gains(vec: np.ndarray) -> ObservedGains:
    vec = np.clip(vec, 0.0, 1.0)
    t = {("X", k): vec[k - 1] for k in (1, 2, 3)}
    t.update({("Z", k): vec[5 + k] for k in (1, 2, 3)})
    f = {("Z", k): vec[2 + k] for k in (1, 2, 3)}
    f.update({("X", k): 0.0 for k in (1, 2, 3)})
    return ObservedGains(t, f)


def tangent_affinization(gains: ObservedGains, settings: DecoySettings, step: float = 1e-7):
    """Tangent plane of the entropy bound in ``(t^X_mu, f^Z_mu, t^Z_mu)``.

    :returns: ``(grad, offset)`` so that ``grad @ v + offset`` approximates the
        bound near ``v``.  Global validity is not guaranteed; see
        :func:`affine_violation`.
    """
    v0 = _vector(gains)
    f = lambda v: decoy_entropy_bound(_gains(v), settings)
    grad = np.array([(f(v0 + step * e) - f(v0 - step * e)) / (2 * step) for e in np.eye(v0.size)])
    return grad, f(v0) - grad @ v0


def affine_violation(grad, offset, settings: DecoySettings, rng: np.random.Generator,
                     samples: int = 1000) -> float:
    """Largest excess of the affine form over the nonlinear bound on random statistics."""
    worst = -np.inf
    for _ in range(samples):
        v = rng.uniform(size=9)
        v[3:6] *= 0.5
        worst = max(worst, float(grad @ v + offset - decoy_entropy_bound(_gains(v), settings)))
    return worst


def gains_from_csv(text: str) -> ObservedGains:
    """Parse rows ``basis,intensity,t,f`` where ``intensity`` is the index 1..3."""
    t, f = {}, {}
    reader = csv.DictReader(io.StringIO(text))
    for row in reader:
        try:
            key = (row["basis"].strip().upper(), int(row["intensity"]))
            t[key] = float(row["t"])
            f[key] = float(row["f"])
        except (KeyError, ValueError) as exc:
            raise DecoyError(f"bad gains row {row}: {exc}") from exc
    return ObservedGains(t, f)


def gains_to_csv(gains: ObservedGains) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["basis", "intensity", "t", "f"])
    for (x, k) in sorted(gains.t_mu):
        w.writerow([x, k, repr(gains.t_mu[(x, k)]), repr(gains.f_mu.get((x, k), 0.0))])
    return out.getvalue()
