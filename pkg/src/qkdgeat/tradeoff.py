"""Certified affine collective-attack bounds.

For a coefficient vector ``lam`` over the statistics alphabet the offset

    c = inf_psi  H(S|IEC)(psi) - lam . nu(psi)

over the source-replacement feasible set gives ``CA(nu) = lam . nu + c``.
The infimum is computed in three stages:

1. a primal solve over an unconstrained factorization of the feasible set
   (L-BFGS with an analytic gradient),
2. a few Frank-Wolfe polish steps with exact line search,
3. a dual certificate for the linearized problem, which yields a rigorous
   lower bound after subtracting a continuity penalty for the
   ``1e-10`` perturbation used to keep logarithms finite.

Entropies are evaluated through spectra: ``H(S|IEC)`` equals the sum over
``(i, c)`` blocks of ``sum_s H(A_s psi A_s) - H(B psi B)`` with
``A_s = sqrt(M^(s,i,c))`` and ``B = sqrt(sum_s M^(s,i,c))``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from . import qcore
from .protocol import BOT, ConstraintOperators, StatisticsVector
from .qcore import dag, hermitize

EPS_PERT = 1e-10
RANK_TOL = 1e-13
TEST_LABELS_B92 = ("fail", "inc", "empty")


class SolverError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class TradeoffFunction:
    """Affine bound ``lam . nu + c_offset`` together with its GEAT properties."""

    labels: tuple
    lam: np.ndarray
    c_offset: float
    max_val: float
    min_val: float
    min_sigma_lb: float
    var_ub: float

    def __post_init__(self):
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "labels", tuple(self.labels))

    def value(self, stats) -> float:
        """Evaluate on a distribution (``StatisticsVector``, dict or array)."""
        if isinstance(stats, StatisticsVector):
            stats = stats.probs
        if isinstance(stats, dict):
            vec = np.array([stats.get(c, 0.0) for c in self.labels])
        else:
            vec = np.asarray(stats, dtype=float)
        return float(self.lam @ vec + self.c_offset)

    def point_values(self) -> np.ndarray:
        return self.lam + self.c_offset

    def to_json(self) -> str:
        d = asdict(self)
        d["lam"] = [float(x) for x in self.lam]
        d["labels"] = list(self.labels)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TradeoffFunction":
        d = json.loads(text)
        return cls(**d)


def generic_tradeoff(labels, lam, c) -> TradeoffFunction:
    """Properties valid for any affine bound: ``MinΣ >= Min`` and Popoviciu's
    variance bound ``(Max - Min)^2 / 4``."""
    vals = np.asarray(lam, dtype=float) + c
    mx, mn = float(vals.max()), float(vals.min())
    return TradeoffFunction(labels, lam, float(c), mx, mn, mn, (mx - mn) ** 2 / 4.0)


@dataclass
class SolveReport:
    upper_value: float
    certified_lower: float
    gap: float
    iterations: int
    perturbation_penalty: float
    context: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# problem assembly


@dataclass
class EntropyProblem:
    """Spectral form of the objective on the support of Alice's marginal.

    ``ops`` stacks the square-root operators; ``signs`` is +1 for pinched
    (per-symbol) terms and -1 for the block terms.
    """

    iso: np.ndarray          # d_p x r isometry onto supp(rho_P)
    rho: np.ndarray          # r x r compressed marginal
    d_q: int
    roots: np.ndarray        # (K, d, d) square roots in the compressed space
    signs: np.ndarray        # (K,)
    ranks: np.ndarray        # (K,)
    lin: np.ndarray          # d x d compressed linear term
    lin_spread: float
    out_dim: int

    @property
    def r(self) -> int:
        return self.rho.shape[0]

    @property
    def d(self) -> int:
        return self.r * self.d_q

    def compress(self, m: np.ndarray) -> np.ndarray:
        j = np.kron(self.iso, np.eye(self.d_q))
        return dag(j) @ m @ j

    def expand(self, m: np.ndarray) -> np.ndarray:
        j = np.kron(self.iso, np.eye(self.d_q))
        return j @ m @ dag(j)

    def penalty(self, eps: float = EPS_PERT) -> float:
        """Continuity cost of replacing ``psi`` by ``(1-eps) psi + eps 1/d``.

        Fannes-Audenaert on both entropies of ``H(P(nu)) - H(nu)`` plus the
        worst-case drift of the linear term.
        """
        dd = self.out_dim
        fa = eps * np.log2(dd - 1) + qcore.binary_entropy(eps)
        return 2.0 * fa + eps * self.lin_spread


def _rank(m: np.ndarray) -> int:
    w = np.linalg.eigvalsh(hermitize(m))
    return int(np.sum(w > RANK_TOL * max(1.0, float(np.max(np.abs(w))))))


def _support_isometry(rho: np.ndarray):
    w, v = np.linalg.eigh(hermitize(rho))
    keep = w > 1e-12
    return v[:, keep], np.diag(w[keep]).astype(complex)


def _assemble(ops: ConstraintOperators, groups, lin_full, lam, out_dim) -> EntropyProblem:
    iso, rho = _support_isometry(ops.alice_marginal)
    j = np.kron(iso, np.eye(ops.d_q))
    roots, signs, ranks = [], [], []
    for parts in groups:
        parts = [dag(j) @ m @ j for m in parts]
        parts = [m for m in parts if np.max(np.abs(m)) > 1e-15]
        if not parts:
            continue
        omega = sum(parts)
        for m, sg in [(omega, -1.0)] + [(m, 1.0) for m in parts]:
            roots.append(qcore.matrix_sqrt(hermitize(m)))
            signs.append(sg)
            ranks.append(_rank(m))
    lam = np.asarray(lam, dtype=float)
    spread = float(lam.max() - lam.min()) if lam.size else 0.0
    return EntropyProblem(iso=iso, rho=rho, d_q=ops.d_q, roots=np.array(roots),
                          signs=np.array(signs), ranks=np.array(ranks),
                          lin=hermitize(dag(j) @ lin_full @ j), lin_spread=spread,
                          out_dim=out_dim)


def full_problem(ops: ConstraintOperators, lam: Sequence[float]) -> EntropyProblem:
    """Objective ``H(S|IEC) - lam . nu`` with one block per ``(i, c)``."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (len(ops.c_labels),):
        raise ValueError("lambda must have one entry per statistics symbol")
    groups = [[ops.m_ops[(s, i, c)] for s in ops.s_labels]
              for i in ops.i_labels for c in ops.c_labels]
    lin = sum(l * ops.gamma_ops[c] for l, c in zip(lam, ops.c_labels))
    out_dim = ops.dim * len(ops.s_labels) * len(ops.i_labels) * len(ops.c_labels)
    return _assemble(ops, groups, lin, lam, out_dim)


def _require_b92(ops: ConstraintOperators):
    if ops.name != "b92" or "n_bot" not in ops.extras:
        raise ValueError("reduced objective requires a B92-shaped specification")


def test_operators(ops: ConstraintOperators, labels=TEST_LABELS_B92):
    """Test-conditioned statistics operators ``Γ_c / γ``."""
    return [ops.gamma_ops[c] / ops.gamma for c in labels]


def reduced_problem(ops: ConstraintOperators, lam_prime: Sequence[float],
                    data_weight: Optional[float] = None) -> EntropyProblem:
    """B92 objective restricted to conclusive data rounds.

    ``data_weight`` multiplies the entropy term; it defaults to ``1 - γ``.
    ``data_weight = 1`` gives the γ-free problem, whose offset rescales to any γ.
    """
    _require_b92(ops)
    w = 1.0 - ops.gamma if data_weight is None else float(data_weight)
    keep = np.eye(ops.d_q) - ops.extras["n_bot"]
    parts = [w * qcore.tensor(qcore.proj(qcore.ket(s, ops.d_p)), keep) for s in range(ops.d_p)]
    lam_prime = np.asarray(lam_prime, dtype=float)
    if lam_prime.shape != (len(TEST_LABELS_B92),):
        raise ValueError("lambda' must have one entry per test symbol")
    lin = sum(l * g for l, g in zip(lam_prime, test_operators(ops)))
    out_dim = ops.dim * (ops.d_p + 1)
    return _assemble(ops, [parts], lin, lam_prime, out_dim)


# --------------------------------------------------------------------------
# spectral objective


def _value_grad(prob: EntropyProblem, psi: np.ndarray, floor: Optional[float] = None,
                want_grad: bool = True):
    """Objective and gradient at a compressed state ``psi``.

    With ``floor=None`` the kernel of each root is identified by its known
    rank (exact for full-rank ``psi``); otherwise eigenvalues at or below
    ``floor`` are treated as zero.
    """
    a = prob.roots
    x = a @ psi[None] @ a
    x = 0.5 * (x + dag(x))
    w, v = np.linalg.eigh(x)
    d = psi.shape[0]
    if floor is None:
        mask = np.arange(d)[None, :] >= (d - prob.ranks)[:, None]
        mask &= w > 0
    else:
        mask = w > floor
    ws = np.where(mask, w, 1.0)
    lg = np.where(mask, np.log2(ws), 0.0)
    ent = -np.sum(np.where(mask, w * lg, 0.0), axis=1)
    val = float(prob.signs @ ent) - float(np.real(np.vdot(prob.lin, psi)))
    if not want_grad:
        return val, None
    logs = (v * lg[:, None, :]) @ dag(v)
    terms = a @ logs @ a
    grad = -np.einsum("k,kij->ij", prob.signs, terms) - prob.lin
    return val, hermitize(grad)


def _perturb(psi: np.ndarray, eps: float) -> np.ndarray:
    d = psi.shape[0]
    return (1.0 - eps) * psi + eps * np.eye(d) / d


def _pert_value_grad(prob, psi, eps=EPS_PERT, want_grad=True):
    val, g = _value_grad(prob, _perturb(psi, eps), want_grad=want_grad)
    return val, (None if g is None else (1.0 - eps) * g)


def _full_blocks(ops: ConstraintOperators, lam):
    groups = [[ops.m_ops[(s, i, c)] for s in ops.s_labels]
              for i in ops.i_labels for c in ops.c_labels]
    roots, signs = [], []
    for parts in groups:
        if all(np.max(np.abs(m)) == 0 for m in parts):
            continue
        omega = sum(parts)
        roots.append(qcore.matrix_sqrt(omega))
        signs.append(-1.0)
        for m in parts:
            if np.max(np.abs(m)) > 0:
                roots.append(qcore.matrix_sqrt(m))
                signs.append(1.0)
    lin = sum(l * ops.gamma_ops[c] for l, c in zip(lam, ops.c_labels))
    d = ops.dim
    return EntropyProblem(iso=np.eye(ops.d_p), rho=ops.alice_marginal, d_q=ops.d_q,
                          roots=np.array(roots), signs=np.array(signs),
                          ranks=np.full(len(roots), d), lin=lin, lin_spread=0.0, out_dim=d)


def _check_feasible(ops: ConstraintOperators, psi: np.ndarray, tol: float = 1e-9):
    psi = qcore.check_hermitian(psi, tol=1e-9)
    if psi.shape != (ops.dim, ops.dim):
        raise ValueError(f"state shape {psi.shape} does not match {ops.dim}")
    marg = qcore.partial_trace(psi, (ops.d_p, ops.d_q), [0])
    if np.max(np.abs(marg - ops.alice_marginal)) > tol:
        raise ValueError("infeasible state: Alice's marginal is not the source marginal")
    if np.linalg.eigvalsh(hermitize(psi))[0] < -1e-9:
        raise ValueError("infeasible state: not positive semidefinite")
    return psi


def objective(ops: ConstraintOperators, lam, psi: np.ndarray):
    """``D(nu1 || P_S nu1) - lam . nu`` and its gradient at a feasible ``psi``.

    The gradient is ``G†(log2 nu1 - log2 P_S nu1) - sum_c lam_c Γ_c`` written
    in spectral form; logarithms vanish on eigenvalues at or below 1e-12.
    """
    psi = _check_feasible(ops, psi)
    lam = np.asarray(lam, dtype=float)
    prob = _full_blocks(ops, lam)
    return _value_grad(prob, psi, floor=qcore.EIG_FLOOR)


def b92_reduced_objective(ops: ConstraintOperators, lam_prime, psi: np.ndarray):
    """``D(ν̃ || P_P ν̃) - lam' . nu_test`` for B92, with its gradient."""
    _require_b92(ops)
    psi = _check_feasible(ops, psi)
    prob = reduced_problem(ops, lam_prime)
    val, g = _value_grad(prob, prob.compress(psi), floor=qcore.EIG_FLOOR)
    return val, prob.expand(g)


# --------------------------------------------------------------------------
# linear minimization over the feasible set


def _herm_from_vec(y: np.ndarray, r: int) -> np.ndarray:
    h = np.zeros((r, r), dtype=complex)
    iu = np.triu_indices(r, 1)
    m = len(iu[0])
    h[np.diag_indices(r)] = y[:r]
    h[iu] = y[r:r + m] + 1j * y[r + m:]
    h[(iu[1], iu[0])] = np.conj(h[iu])
    return h


def _vec_from_herm(h: np.ndarray) -> np.ndarray:
    r = h.shape[0]
    iu = np.triu_indices(r, 1)
    return np.concatenate([np.real(np.diag(h)), np.real(h[iu]), np.imag(h[iu])])


def _grad_vec(g: np.ndarray) -> np.ndarray:
    """Map ``dphi = tr(g dY)`` to the gradient in the ``_herm_from_vec`` coordinates."""
    r = g.shape[0]
    iu = np.triu_indices(r, 1)
    gt = g.T
    return np.concatenate([np.real(np.diag(gt)), 2 * np.real(gt[iu]), -2 * np.imag(gt[iu])])


def _ptrace_q(m: np.ndarray, r: int, dq: int) -> np.ndarray:
    return np.einsum("aibi->ab", m.reshape(r, dq, r, dq))


_BETAS = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8, 1e9)


def _dual_ascent(w: np.ndarray, rho: np.ndarray, y0: Optional[np.ndarray] = None):
    """Maximize a log-sum-exp smoothing of ``tr(rho Y) + λmin(w - Y⊗1)``.

    Returns ``(bound, Y, primal)`` where ``bound`` is certified by the exact
    eigenvalue shift and ``primal`` is a feasible near-minimizer.
    """
    r = rho.shape[0]
    dq = w.shape[0] // r
    eye = np.eye(dq)
    scale = float(np.max(np.abs(np.linalg.eigvalsh(w)))) or 1.0
    wn = w / scale
    y = np.zeros(r * r) if y0 is None else _vec_from_herm(y0 / scale)

    def negphi(yv, beta):
        yy = _herm_from_vec(yv, r)
        e, v = np.linalg.eigh(wn - np.kron(yy, eye))
        z = np.exp(-beta * (e - e[0]))
        zs = z.sum()
        val = float(np.real(np.trace(rho @ yy))) + e[0] - np.log(zs) / beta
        pi = (v * (z / zs)) @ dag(v)
        g = rho - _ptrace_q(pi, r, dq)
        return -val, -_grad_vec(g)

    betas = _BETAS if y0 is None else _BETAS[3:]
    for beta in betas:
        res = minimize(negphi, y, args=(beta,), jac=True, method="L-BFGS-B",
                       options=dict(maxiter=2000, gtol=1e-14, ftol=1e-16))
        y = res.x
    yy = _herm_from_vec(y, r)
    e, v = np.linalg.eigh(wn - np.kron(yy, eye))
    bound = (float(np.real(np.trace(rho @ yy))) + e[0]) * scale
    # primal: soft projector onto the bottom of the spectrum, re-pinned to rho,
    # or a marginal-fitted state on a low-lying eigenspace when that is better
    p = np.exp(-_BETAS[-1] * (e - e[0]))
    pi = (v * (p / p.sum())) @ dag(v)
    cands = [_pin_marginal(pi, rho, dq)]
    for k in range(r, v.shape[1] + 1):
        cands.append(_fit_subspace(v[:, :k], rho, dq))
    primal = min(cands, key=lambda x: float(np.real(np.vdot(wn, x))))
    return bound, yy * scale, primal


def _fit_subspace(v: np.ndarray, rho: np.ndarray, dq: int) -> np.ndarray:
    """State ``V Z V†`` whose P marginal is as close to ``rho`` as possible, then pinned."""
    r, k = rho.shape[0], v.shape[1]
    eye = np.eye(dq)

    def fun(x):
        l = (x[:k * k] + 1j * x[k * k:]).reshape(k, k)
        z = l @ dag(l)
        res = _ptrace_q(v @ z @ dag(v), r, dq) - rho
        g = 4 * dag(v) @ np.kron(res, eye) @ v @ l
        return float(np.sum(np.abs(res) ** 2)), np.concatenate([g.real.ravel(), g.imag.ravel()])

    x0 = np.concatenate([np.sqrt(r / k) * np.eye(k).ravel(), np.zeros(k * k)])
    x = minimize(fun, x0, jac=True, method="L-BFGS-B",
                 options=dict(maxiter=500, gtol=1e-14, ftol=1e-16)).x
    l = (x[:k * k] + 1j * x[k * k:]).reshape(k, k)
    return _pin_marginal(v @ l @ dag(l) @ dag(v), rho, dq)


def _pin_marginal(m: np.ndarray, rho: np.ndarray, dq: int) -> np.ndarray:
    """Congruence ``(A⊗1) m (A⊗1)†`` that makes the P marginal equal ``rho``."""
    r = rho.shape[0]
    t = _ptrace_q(m, r, dq)
    tw, tu = np.linalg.eigh(hermitize(t))
    tw = np.clip(tw, 1e-300, None)
    a = qcore.matrix_sqrt(rho) @ (tu / np.sqrt(tw)) @ dag(tu)
    big = np.kron(a, np.eye(dq))
    return hermitize(big @ m @ dag(big))


def lin_lower_bound(w: np.ndarray, alice_marginal: np.ndarray, d_q: Optional[int] = None):
    """Certified ``min tr(w psi)`` over ``psi >= 0`` with ``Tr_Q psi = alice_marginal``.

    :returns: ``(bound, minimizer, dual_witness)``; the witness ``Y`` lives on
        P and satisfies ``w - (Y + μ1)⊗1 >= 0`` on ``supp(ρ_P)⊗Q``.
    """
    w = qcore.check_hermitian(w, tol=1e-9)
    dp = alice_marginal.shape[0]
    dq = w.shape[0] // dp if d_q is None else d_q
    iso, rho = _support_isometry(alice_marginal)
    j = np.kron(iso, np.eye(dq))
    wc = hermitize(dag(j) @ w @ j)
    bound, yy, primal = _dual_ascent(wc, rho)
    return bound, hermitize(j @ primal @ dag(j)), iso @ yy @ dag(iso)


# --------------------------------------------------------------------------
# primal factorization  psi = (A⊗1) Y Y† (A⊗1)†,  A = sqrt(rho) S^{-1/2},  S = Tr_Q YY†


def _bm_map(prob: EntropyProblem, yv: np.ndarray):
    d, r, dq = prob.d, prob.r, prob.d_q
    y = (yv[:d * d] + 1j * yv[d * d:]).reshape(d, d)
    yy = y @ dag(y)
    sw, su = np.linalg.eigh(hermitize(_ptrace_q(yy, r, dq)))
    sw = np.clip(sw, 1e-300, None)
    rs = np.diag(np.sqrt(np.real(np.diag(prob.rho)))).astype(complex)
    b = np.kron(rs @ (su / np.sqrt(sw)) @ dag(su), np.eye(dq))
    psi = hermitize(b @ yy @ dag(b))
    return y, yy, sw, su, rs, b, psi


def _bm_fun(yv, prob: EntropyProblem):
    r, dq = prob.r, prob.d_q
    y, yy, sw, su, rs, b, psi = _bm_map(prob, yv)
    val, g = _pert_value_grad(prob, psi)
    c = _ptrace_q(yy @ dag(b) @ g, r, dq)
    xm = c @ rs
    e = dag(su) @ (xm + dag(xm)) @ su
    fi = sw ** -0.5
    den = sw[:, None] - sw[None, :]
    same = np.abs(den) <= 1e-12 * np.max(sw)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(same, 0.0, (fi[:, None] - fi[None, :]) / np.where(same, 1.0, den))
    f = np.where(same, -0.5 * (sw ** -1.5)[:, None] * np.ones(r), f)
    h = su @ (f * e) @ dag(su)
    gh = dag(b) @ g @ b + np.kron(h, np.eye(dq))
    z = gh @ y
    return val, np.concatenate([2 * z.real.ravel(), 2 * z.imag.ravel()])


def _initial_y(prob: EntropyProblem, seed: int = 0) -> np.ndarray:
    d = prob.d
    rng = np.random.default_rng(seed)
    base = np.eye(d).ravel()
    return np.concatenate([base, np.zeros(d * d)]) + 1e-2 * rng.normal(size=2 * d * d)


def solve_primal(prob: EntropyProblem, y0: Optional[np.ndarray] = None, maxiter: int = 5000):
    """Minimize the perturbed objective over the factorization.

    :returns: ``(value, psi, y)`` with ``psi`` compressed and feasible.
    """
    y = _initial_y(prob) if y0 is None else _regauge(prob, y0)
    res = minimize(_bm_fun, y, args=(prob,), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=maxiter, maxcor=30, gtol=1e-12, ftol=1e-15))
    psi = _bm_map(prob, res.x)[-1]
    val = _pert_value_grad(prob, psi, want_grad=False)[0]
    marg = _ptrace_q(psi, prob.r, prob.d_q)
    if not np.isfinite(val) or np.max(np.abs(marg - prob.rho)) > 1e-8:
        if y0 is not None:
            return solve_primal(prob, None, maxiter)
        raise SolverError("primal factorization left the feasible set")
    return float(val), psi, res.x


def _regauge(prob: EntropyProblem, yv: np.ndarray) -> np.ndarray:
    """Rescale a warm start so that ``Tr_Q YY†`` is the identity (same ``psi``)."""
    d = prob.d
    y, _, sw, su, *_ = _bm_map(prob, yv)
    if sw.min() < 1e-8 * sw.max():
        return _initial_y(prob)
    y = np.kron((su / np.sqrt(sw)) @ dag(su), np.eye(prob.d_q)) @ y
    return np.concatenate([y.real.ravel(), y.imag.ravel()])


def _line_search(prob, psi, s):
    f = lambda t: _pert_value_grad(prob, (1 - t) * psi + t * s, want_grad=False)[0]
    res = minimize_scalar(f, bounds=(0.0, 1.0), method="bounded",
                          options=dict(xatol=1e-12, maxiter=200))
    t = float(res.x)
    f1 = f(1.0)
    if f1 < res.fun:
        return 1.0, f1
    return t, float(res.fun)


def _certify_at(prob, psi, y0=None):
    """Linearization bound at ``psi``: ``F(psi) + min <∇F, X - psi>``."""
    val, g = _pert_value_grad(prob, psi)
    bound, yy, s = _dual_ascent(g, prob.rho, y0)
    lower = val - float(np.real(np.vdot(g, psi))) + bound
    return val, lower, s, yy


def frank_wolfe_problem(prob: EntropyProblem, psi0: np.ndarray, tol: float, max_iter: int):
    """Frank-Wolfe on a compressed problem; returns ``(psi, upper, best_lower, iters)``."""
    psi = psi0
    best_lower = -np.inf
    upper = _pert_value_grad(prob, psi, want_grad=False)[0]
    it = 0
    yy = None
    while True:
        val, lower, s, yy = _certify_at(prob, psi, yy)
        best_lower = max(best_lower, lower)
        upper = val
        if val - best_lower <= tol or it >= max_iter:
            break
        t, fnew = _line_search(prob, psi, s)
        it += 1
        if not fnew < val or t == 0.0:
            # Stalled at round-off: the linearization is loose near the
            # boundary, so probe nearby feasible points for a tighter bound.
            mix = np.kron(prob.rho, np.eye(prob.d_q) / prob.d_q)
            probes = [(1 - t) * psi + t * s] + [(1 - e) * psi + e * mix for e in (1e-12, 1e-10, 1e-9)]
            for q in probes:
                best_lower = max(best_lower, _certify_at(prob, q, yy)[1])
            break
        psi = (1 - t) * psi + t * s
    return psi, upper, best_lower, it


def _solve_certified(prob: EntropyProblem, tol: float, max_fw: int = 20, y0=None):
    upper0, psi, y = solve_primal(prob, y0)
    psi, upper, lower, it = frank_wolfe_problem(prob, psi, tol, max_fw)
    pen = prob.penalty()
    cert = lower - pen
    rep = SolveReport(upper_value=upper, certified_lower=cert, gap=upper - cert,
                      iterations=it, perturbation_penalty=pen)
    return cert, rep, psi, y


def frank_wolfe(ops: ConstraintOperators, lam, tol: float = 1e-6, max_iter: int = 10000,
                psi0: Optional[np.ndarray] = None, reduced: bool = False):
    """Plain Frank-Wolfe from ``psi0`` (default: ``ρ_P ⊗ 1/d_Q``).

    :returns: ``(psi_star, SolveReport)`` with ``psi_star`` on the full P⊗Q space.
    """
    prob = reduced_problem(ops, lam) if reduced else full_problem(ops, lam)
    if psi0 is None:
        psi0 = qcore.tensor(ops.alice_marginal, np.eye(ops.d_q) / ops.d_q)
    start = hermitize(prob.compress(np.asarray(psi0, dtype=complex)))
    if not np.isfinite(tol):
        val = _pert_value_grad(prob, start, want_grad=False)[0]
        return np.asarray(psi0, dtype=complex), SolveReport(val, -np.inf, np.inf, 0, prob.penalty())
    psi, upper, lower, it = frank_wolfe_problem(prob, start, tol, max_iter)
    pen = prob.penalty()
    cert = lower - pen
    return prob.expand(psi), SolveReport(upper, cert, upper - cert, it, pen)


def certified_c_lambda(ops: ConstraintOperators, lam, tol: float = 1e-8):
    """Certified offset for the full objective; ``lam . nu + c <= H(S|IEC)``."""
    prob = full_problem(ops, lam)
    c, rep, _, _ = _solve_certified(prob, tol)
    return c, rep


def certified_c_reduced(ops: ConstraintOperators, lam_prime, tol: float = 1e-8,
                        data_weight: Optional[float] = None, y0=None):
    """Certified offset of the reduced B92 program (test-conditioned ``lam'``)."""
    prob = reduced_problem(ops, lam_prime, data_weight)
    c, rep, psi, y = _solve_certified(prob, tol, y0=y0)
    rep.context["y"] = y
    return c, rep


def upper_c_reduced(ops: ConstraintOperators, lam_prime, data_weight=None, y0=None):
    """Uncertified optimum of the reduced program (for search loops)."""
    prob = reduced_problem(ops, lam_prime, data_weight)
    val, psi, y = solve_primal(prob, y0)
    return val, prob.expand(psi), y


# --------------------------------------------------------------------------
# lifting and λ heuristics


def lift_test_data(g: TradeoffFunction, gamma: float, bot_label: str = BOT) -> TradeoffFunction:
    """Extend a test-round bound ``g`` to all rounds with testing probability γ."""
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside (0, 1]")
    gv = g.point_values()
    mx, mn = float(gv.max()), float(gv.min())
    lifted = mx + (gv - mx) / gamma
    vals = np.append(lifted, mx)
    # write as lam + c with c = Max g so that the bot coefficient is 0
    return TradeoffFunction(labels=tuple(g.labels) + (bot_label,), lam=vals - mx,
                            c_offset=mx, max_val=mx, min_val=mx + (mn - mx) / gamma,
                            min_sigma_lb=mn, var_ub=(mx - mn) ** 2 / gamma)


def heuristic_lambda(ops: ConstraintOperators, target_stats, reduced: bool = False,
                     cap: float = 100.0, data_weight: Optional[float] = None,
                     maxiter: int = 200) -> np.ndarray:
    """Coefficients that make the affine bound tight at ``target_stats``.

    Maximizes the concave map ``lam -> lam . nu* + c(lam)``; its gradient is
    ``nu* - nu(psi*(lam))``.  The gauge is fixed by pinning the last
    coefficient to 0 and the rest are boxed by ``cap``.
    """
    labels = TEST_LABELS_B92 if reduced else tuple(ops.c_labels)
    if isinstance(target_stats, StatisticsVector):
        target_stats = target_stats.probs
    if isinstance(target_stats, dict):
        nu = np.array([target_stats[c] for c in labels], dtype=float)
    else:
        nu = np.asarray(target_stats, dtype=float)
    nu = nu / nu.sum()
    gams = test_operators(ops) if reduced else [ops.gamma_ops[c] for c in labels]
    k = len(labels)
    state = {"y": None}

    def neg(x):
        lam = np.append(x, 0.0)
        prob = reduced_problem(ops, lam, data_weight) if reduced else full_problem(ops, lam)
        val, psi, y = solve_primal(prob, state["y"])
        state["y"] = y
        full = prob.expand(psi)
        nu_psi = np.array([np.real(np.trace(g @ full)) for g in gams])
        return -(lam @ nu + val), -(nu - nu_psi)[:-1]

    res = minimize(neg, np.zeros(k - 1), jac=True, method="L-BFGS-B",
                   bounds=[(-cap, cap)] * (k - 1),
                   options=dict(maxiter=maxiter, gtol=1e-9, ftol=1e-13))
    return np.append(res.x, 0.0)
