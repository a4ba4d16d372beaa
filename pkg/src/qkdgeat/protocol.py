"""Prepare-and-measure protocol data model and constraint operators.

A protocol is described by a classical-quantum source, a receiver POVM and
three classical tables (public discussion, raw key, evaluation).  The test
coin is folded into the receiver outcome so every table is deterministic.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import qcore
from .qcore import dag, proj, tensor

BOT = "bot"


class ProtocolError(ValueError):
    """Raised when a specification fails validation."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


@dataclass(frozen=True)
class ProtocolSpec:
    """All single-round arguments of a prepare-and-measure protocol.

    ``source`` holds ``(p(u), |psi_u>)`` in the order of ``u_labels``;
    ``povm`` holds the (test-coin folded) elements in the order of
    ``v_labels``.  Tables map label tuples to labels.
    """

    source: Tuple
    povm: Tuple
    pd_table: Dict
    rk_table: Dict
    ev_table: Dict
    u_labels: Tuple
    v_labels: Tuple
    i_labels: Tuple
    s_labels: Tuple
    c_labels: Tuple
    gamma: float
    name: str = "custom"

    @property
    def d_p(self) -> int:
        return len(self.u_labels)

    @property
    def d_q(self) -> int:
        return int(np.asarray(self.source[0][1]).size)


@dataclass(frozen=True)
class StatisticsVector:
    """Distribution over the statistics alphabet, stored in label order."""

    labels: Tuple
    values: np.ndarray

    @property
    def probs(self) -> Dict:
        return {c: float(v) for c, v in zip(self.labels, self.values)}

    def __getitem__(self, c):
        return float(self.values[self.labels.index(c)])


@dataclass(frozen=True)
class ConstraintOperators:
    """Operators of the convex program obtained by source replacement."""

    m_ops: Dict
    gamma_ops: Dict
    source_pure: np.ndarray
    alice_marginal: np.ndarray
    s_labels: Tuple
    i_labels: Tuple
    c_labels: Tuple
    d_p: int
    d_q: int
    gamma: float
    name: str = "custom"
    extras: Dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.d_p * self.d_q

    def gamma_stack(self) -> np.ndarray:
        return np.array([self.gamma_ops[c] for c in self.c_labels])


def validate(spec: ProtocolSpec) -> List[str]:
    """Return a list of violated invariants (empty when the spec is fine)."""
    diags = []
    probs = np.array([float(p) for p, _ in spec.source])
    if len(spec.source) != len(spec.u_labels):
        diags.append("source normalization: source length differs from U alphabet")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        diags.append(f"source normalization: probabilities sum to {probs.sum():.12g}")
    for u, (_, vec) in zip(spec.u_labels, spec.source):
        nrm = np.linalg.norm(np.asarray(vec, dtype=complex))
        if abs(nrm - 1.0) > 1e-12:
            diags.append(f"source normalization: state for u={u} has norm {nrm:.12g}")
    if len(spec.povm) != len(spec.v_labels):
        diags.append("POVM completeness: element count differs from V alphabet")
    total = np.zeros((spec.d_q, spec.d_q), dtype=complex)
    for v, el in zip(spec.v_labels, spec.povm):
        el = np.asarray(el, dtype=complex)
        if el.shape != (spec.d_q, spec.d_q):
            diags.append(f"POVM completeness: element {v} has shape {el.shape}")
            continue
        if np.max(np.abs(el - dag(el))) > 1e-12 or np.linalg.eigvalsh(qcore.hermitize(el))[0] < -1e-10:
            diags.append(f"POVM positivity: element {v} is not PSD")
        total = total + el
    if np.max(np.abs(total - np.eye(spec.d_q))) > 1e-10:
        diags.append("POVM completeness: elements do not sum to identity")
    if not 0.0 < spec.gamma <= 1.0:
        diags.append(f"testing probability: gamma={spec.gamma} outside (0, 1]")
    for u, v in itertools.product(spec.u_labels, spec.v_labels):
        i = spec.pd_table.get((u, v))
        if i not in spec.i_labels:
            diags.append(f"PD table: missing or invalid entry for {(u, v)}")
    for u, i in itertools.product(spec.u_labels, spec.i_labels):
        if spec.rk_table.get((u, i)) not in spec.s_labels:
            diags.append(f"RK table: missing or invalid entry for {(u, i)}")
    for v, i, s in itertools.product(spec.v_labels, spec.i_labels, spec.s_labels):
        if spec.ev_table.get((v, i, s)) not in spec.c_labels:
            diags.append(f"EV table: missing or invalid entry for {(v, i, s)}")
    return diags


def require_valid(spec: ProtocolSpec) -> ProtocolSpec:
    diags = validate(spec)
    if diags:
        raise ProtocolError(diags)
    return spec


def source_replacement(spec: ProtocolSpec) -> ConstraintOperators:
    """Build the entangled source, Alice's marginal and every ``M^(s,i,c)``."""
    require_valid(spec)
    dp, dq = spec.d_p, spec.d_q
    psi = np.zeros(dp * dq, dtype=complex)
    for k, (p, vec) in enumerate(spec.source):
        psi += np.sqrt(float(p)) * np.kron(qcore.ket(k, dp), np.asarray(vec, dtype=complex))
    rho = qcore.partial_trace(proj(psi), (dp, dq), [0])
    m_ops = {}
    for s, i, c in itertools.product(spec.s_labels, spec.i_labels, spec.c_labels):
        m_ops[(s, i, c)] = np.zeros((dp * dq, dp * dq), dtype=complex)
    for (ku, u), (kv, v) in itertools.product(enumerate(spec.u_labels), enumerate(spec.v_labels)):
        i = spec.pd_table[(u, v)]
        s = spec.rk_table[(u, i)]
        c = spec.ev_table[(v, i, s)]
        m_ops[(s, i, c)] += tensor(proj(qcore.ket(ku, dp)), spec.povm[kv])
    gamma_ops = {c: sum(m_ops[(s, i, c)] for s in spec.s_labels for i in spec.i_labels)
                 for c in spec.c_labels}
    extras = {}
    if spec.name == "b92":
        nbot = sum(el for v, el in zip(spec.v_labels, spec.povm) if v.startswith(BOT))
        extras["n_bot"] = nbot
    return ConstraintOperators(m_ops=m_ops, gamma_ops=gamma_ops, source_pure=psi,
                               alice_marginal=rho, s_labels=spec.s_labels,
                               i_labels=spec.i_labels, c_labels=spec.c_labels,
                               d_p=dp, d_q=dq, gamma=spec.gamma, name=spec.name,
                               extras=extras)


def _check_psi(ops: ConstraintOperators, psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (ops.dim, ops.dim):
        raise qcore.QCoreError(f"state shape {psi.shape} does not match P⊗Q dim {ops.dim}")
    return psi


def nu1(ops: ConstraintOperators, psi: np.ndarray) -> np.ndarray:
    """Explicit state on P⊗Q⊗S⊗I⊗C built from ``psi``.

    Its S-pinched relative entropy equals H(S|IEC); the matrix is only
    materialized when the full dimension respects the guard.
    """
    psi = _check_psi(ops, psi)
    ns, ni, nc = len(ops.s_labels), len(ops.i_labels), len(ops.c_labels)
    dim = ops.dim * ns * ni * nc
    if dim > qcore.MAX_DIM:
        raise qcore.QCoreError(f"nu1 dimension {dim} exceeds guard {qcore.MAX_DIM}")
    roots = {k: qcore.matrix_sqrt(m) for k, m in ops.m_ops.items()}
    out = np.zeros((dim, dim), dtype=complex)
    d = ops.dim
    t = out.reshape(d, ns, ni, nc, d, ns, ni, nc)
    for (a, s), (b, s2) in itertools.product(enumerate(ops.s_labels), repeat=2):
        for ki, i in enumerate(ops.i_labels):
            for kc, c in enumerate(ops.c_labels):
                blk = roots[(s, i, c)] @ psi @ roots[(s2, i, c)]
                t[:, a, ki, kc, :, b, ki, kc] = blk
    return out


def nu1_blocks(ops: ConstraintOperators, psi: np.ndarray) -> Dict:
    """The ``(i, c)`` diagonal blocks of ``nu1``, each on P⊗Q⊗S.

    ``nu1`` is block diagonal in the classical registers I and C, so these
    blocks carry all of it without the dimension guard.
    """
    psi = _check_psi(ops, psi)
    ns, d = len(ops.s_labels), ops.dim
    roots = {k: qcore.matrix_sqrt(m) for k, m in ops.m_ops.items()}
    out = {}
    for i in ops.i_labels:
        for c in ops.c_labels:
            blk = np.zeros((d, ns, d, ns), dtype=complex)
            for (a, s), (b, s2) in itertools.product(enumerate(ops.s_labels), repeat=2):
                blk[:, a, :, b] = roots[(s, i, c)] @ psi @ roots[(s2, i, c)]
            out[(i, c)] = blk.reshape(d * ns, d * ns)
    return out


def nu1_layout(ops: ConstraintOperators) -> Tuple[int, ...]:
    """Factor dims (P⊗Q, S, I, C) of ``nu1``; the S factor sits at index 1."""
    return (ops.dim, len(ops.s_labels), len(ops.i_labels), len(ops.c_labels))


def statistics(ops: ConstraintOperators, psi: np.ndarray) -> StatisticsVector:
    """``probs[c] = tr(Γ_c psi)``."""
    psi = _check_psi(ops, psi)
    vals = np.array([np.real(np.trace(ops.gamma_ops[c] @ psi)) for c in ops.c_labels])
    return StatisticsVector(tuple(ops.c_labels), vals)


def depolarize_q(ops_or_dims, psi: np.ndarray, p: float) -> np.ndarray:
    """Apply ``rho -> (1-p) rho + p 1/d`` to the Q factor of a state on P⊗Q."""
    dp, dq = (ops_or_dims.d_p, ops_or_dims.d_q) if hasattr(ops_or_dims, "d_p") else ops_or_dims
    rp = qcore.partial_trace(psi, (dp, dq), [0])
    return (1.0 - p) * psi + p * tensor(rp, np.eye(dq) / dq)


def honest_state(spec: ProtocolSpec, p: float) -> np.ndarray:
    ops = source_replacement(spec)
    return depolarize_q(ops, proj(ops.source_pure), p)


def honest_model(spec: ProtocolSpec, p: float):
    """Honest statistics under depolarizing noise ``p`` and ``H(S|VI)`` in bits.

    ``H(S|VI)`` is computed from the exact single-round joint distribution
    of (U, V): ``S`` and ``I`` are functions of it via the tables.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise p={p} outside [0, 1]")
    ops = source_replacement(spec)
    psi = depolarize_q(ops, proj(ops.source_pure), p)
    stats = statistics(ops, psi)
    rho_uv = joint_uv(spec, psi)
    joint_svi: Dict = {}
    joint_vi: Dict = {}
    for (u, v), pr in rho_uv.items():
        i = spec.pd_table[(u, v)]
        s = spec.rk_table[(u, i)]
        joint_svi[(s, v, i)] = joint_svi.get((s, v, i), 0.0) + pr
        joint_vi[(v, i)] = joint_vi.get((v, i), 0.0) + pr
    h_svi = qcore.entropy_of_spectrum(np.array(list(joint_svi.values())))
    h_vi = qcore.entropy_of_spectrum(np.array(list(joint_vi.values())))
    return stats, max(0.0, h_svi - h_vi)


def joint_uv(spec: ProtocolSpec, psi: np.ndarray) -> Dict:
    """Single-round joint ``p(u, v) = tr((|u><u| ⊗ N_v) psi)``, clipped at 0."""
    out = {}
    for (ku, u), (kv, v) in itertools.product(enumerate(spec.u_labels), enumerate(spec.v_labels)):
        op = tensor(proj(qcore.ket(ku, spec.d_p)), spec.povm[kv])
        out[(u, v)] = max(0.0, float(np.real(np.trace(op @ psi))))
    return out


def _fold_test(elements: Sequence[Tuple[str, np.ndarray]], gamma: float):
    labels, povm = [], []
    for t, w in (("t", gamma), ("d", 1.0 - gamma)):
        for v, el in elements:
            labels.append(f"{v}:{t}")
            povm.append(w * np.asarray(el, dtype=complex))
    return tuple(labels), tuple(povm)


def _check_gamma(gamma):
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside (0, 1]")
    return gamma


def b92_preset(gamma: float) -> ProtocolSpec:
    """B92 with states |0>, |+> and the unambiguous-discrimination POVM."""
    gamma = _check_gamma(gamma)
    plus = np.array([1, 1], dtype=complex) / np.sqrt(2)
    minus = np.array([1, -1], dtype=complex) / np.sqrt(2)
    one = np.array([0, 1], dtype=complex)
    zero = np.array([1, 0], dtype=complex)
    phys = [("0", 0.5 * proj(minus)), ("1", 0.5 * proj(one)),
            (BOT, 0.5 * (proj(zero) + proj(plus)))]
    v_labels, povm = _fold_test(phys, gamma)
    u_labels = ("0", "1")
    i_labels = ("top", BOT)
    s_labels = ("0", "1", BOT)
    c_labels = ("fail", "inc", "empty", BOT)
    pd = {(u, v): (BOT if v.split(":")[0] == BOT else "top") for u in u_labels for v in v_labels}
    rk = {(u, i): (u if i == "top" else BOT) for u in u_labels for i in i_labels}
    ev = {}
    for v, i, s in itertools.product(v_labels, i_labels, s_labels):
        vp, t = v.split(":")
        if t == "d":
            c = BOT
        elif (s == "0" and vp == "1") or (s == "1" and vp == "0"):
            c = "fail"
        elif vp == BOT:
            c = "inc"
        else:
            c = "empty"
        ev[(v, i, s)] = c
    return ProtocolSpec(source=((0.5, zero), (0.5, plus)), povm=povm, pd_table=pd,
                        rk_table=rk, ev_table=ev, u_labels=u_labels, v_labels=v_labels,
                        i_labels=i_labels, s_labels=s_labels, c_labels=c_labels,
                        gamma=gamma, name="b92")


def bb84_preset(gamma: float) -> ProtocolSpec:
    """Qubit BB84 with uniform bases; sifted rounds keep Alice's bit."""
    gamma = _check_gamma(gamma)
    had = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
    basis = {0: np.eye(2, dtype=complex), 1: had}
    u_labels = tuple(f"{x}{a}" for x in "01" for a in "01")
    source = tuple((0.25, basis[int(u[0])][:, int(u[1])]) for u in u_labels)
    phys = [(f"{y}{b}", 0.5 * proj(basis[int(y)][:, int(b)])) for y in "01" for b in "01"]
    v_labels, povm = _fold_test(phys, gamma)
    i_labels = tuple(f"{x}{y}" for x in "01" for y in "01")
    s_labels = ("0", "1", BOT)
    c_labels = ("1", "0", BOT)
    pd = {(u, v): u[0] + v[0] for u in u_labels for v in v_labels}
    rk = {(u, i): (u[1] if i[0] == i[1] else BOT) for u in u_labels for i in i_labels}
    ev = {}
    for v, i, s in itertools.product(v_labels, i_labels, s_labels):
        t = v.split(":")[1]
        if t == "d" or i[0] != i[1] or s == BOT:
            ev[(v, i, s)] = BOT
        else:
            ev[(v, i, s)] = "1" if v[1] == s else "0"
    return ProtocolSpec(source=source, povm=povm, pd_table=pd, rk_table=rk, ev_table=ev,
                        u_labels=u_labels, v_labels=v_labels, i_labels=i_labels,
                        s_labels=s_labels, c_labels=c_labels, gamma=gamma, name="bb84")


PRESETS = {"b92": b92_preset, "bb84": bb84_preset}


def _cplx(x):
    arr = np.asarray(x, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


def spec_from_json(doc) -> ProtocolSpec:
    """Parse a JSON document (dict or string) into a validated spec.

    Complex entries are ``[re, im]`` pairs; tables are arrays of label tuples
    whose last entry is the image.
    """
    if isinstance(doc, str):
        doc = json.loads(doc)
    if "preset" in doc:
        return PRESETS[doc["preset"]](float(doc.get("gamma", 0.1)))
    try:
        source = tuple((float(e["p"]), _cplx(e["state"])) for e in doc["source"])
        povm = tuple(_cplx(e) for e in doc["povm"])
        spec = ProtocolSpec(
            source=source, povm=povm,
            pd_table={(r[0], r[1]): r[2] for r in doc["pd_table"]},
            rk_table={(r[0], r[1]): r[2] for r in doc["rk_table"]},
            ev_table={(r[0], r[1], r[2]): r[3] for r in doc["ev_table"]},
            u_labels=tuple(doc["U"]), v_labels=tuple(doc["V"]), i_labels=tuple(doc["I"]),
            s_labels=tuple(doc["S"]), c_labels=tuple(doc["C"]),
            gamma=float(doc["gamma"]), name=doc.get("name", "custom"))
    except (KeyError, TypeError, IndexError) as exc:
        raise ProtocolError([f"schema: {exc!r}"]) from exc
    return require_valid(spec)


def spec_to_json(spec: ProtocolSpec) -> dict:
    def pair(m):
        m = np.asarray(m, dtype=complex)
        return np.stack([m.real, m.imag], axis=-1).tolist()

    return {
        "name": spec.name, "gamma": spec.gamma,
        "U": list(spec.u_labels), "V": list(spec.v_labels), "I": list(spec.i_labels),
        "S": list(spec.s_labels), "C": list(spec.c_labels),
        "source": [{"p": p, "state": pair(v)} for p, v in spec.source],
        "povm": [pair(e) for e in spec.povm],
        "pd_table": [[u, v, i] for (u, v), i in spec.pd_table.items()],
        "rk_table": [[u, i, s] for (u, i), s in spec.rk_table.items()],
        "ev_table": [[v, i, s, c] for (v, i, s), c in spec.ev_table.items()],
    }


def random_feasible_state(ops: ConstraintOperators, rng: np.random.Generator,
                          rank: int | None = None) -> np.ndarray:
    """Random ``psi`` on P⊗Q with ``Tr_Q psi`` equal to Alice's marginal.

    The state is drawn on ``supp(rho_P) ⊗ Q`` and pinned to the marginal by a
    congruence, so rank-deficient marginals are handled.
    """
    dq = ops.d_q
    w, v = np.linalg.eigh(qcore.hermitize(ops.alice_marginal))
    keep = w > 1e-12
    iso, r = v[:, keep], int(keep.sum())
    m = qcore.random_density(r * dq, rng, None if rank is None else min(rank, r * dq))
    t = qcore.partial_trace(m, (r, dq), [0])
    tw, tu = np.linalg.eigh(qcore.hermitize(t))
    a = np.diag(np.sqrt(w[keep])) @ (tu / np.sqrt(tw)) @ dag(tu)
    big = tensor(iso @ a, np.eye(dq))
    return qcore.hermitize(big @ m @ dag(big))


def eve_blocks(ops: ConstraintOperators, psi: np.ndarray):
    """Purification-based cq blocks ``(i, c) -> sum_s |s><s| ⊗ ρ_E^{sic}``.

    With ``E`` purifying ``psi``, ``ρ_E^{sic} = (√psi M^{(s,i,c)} √psi)^T``.
    """
    psi = _check_psi(ops, psi)
    root = qcore.matrix_sqrt(psi)
    ns = len(ops.s_labels)
    d = ops.dim
    out = {}
    for i in ops.i_labels:
        for c in ops.c_labels:
            blk = np.zeros((ns * d, ns * d), dtype=complex)
            for k, s in enumerate(ops.s_labels):
                blk[k * d:(k + 1) * d, k * d:(k + 1) * d] = (root @ ops.m_ops[(s, i, c)] @ root).T
            out[(i, c)] = blk
    return out


def conditional_entropy_sic(ops: ConstraintOperators, psi: np.ndarray) -> float:
    """``H(S|IEC)`` of the measured state, summing ``p_ic H(S|E)`` over classical blocks."""
    total = 0.0
    d = ops.dim
    for blk in eve_blocks(ops, psi).values():
        p = float(np.real(np.trace(blk)))
        if p <= 1e-15:
            continue
        total += p * qcore.conditional_entropy(blk / p, (len(ops.s_labels), d), 0, [1])
    return total
