"""Dense Hermitian linear algebra and entropy primitives.

Matrices are plain ``numpy`` arrays; a layout is a tuple of tensor factor
dimensions.  Every entropy is measured in bits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAX_DIM = 256
EIG_FLOOR = 1e-12
NEG_TOL = 1e-10
HERM_TOL = 1e-12


class QCoreError(ValueError):
    """Raised on malformed matrices, layouts or arguments."""


@dataclass(frozen=True)
class SystemLayout:
    """Ordered tensor factor dimensions, e.g. ``SystemLayout((2, 2))``."""

    factor_dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.factor_dims)
        if not dims or any(d < 1 for d in dims):
            raise QCoreError("factor dimensions must be positive")
        object.__setattr__(self, "factor_dims", dims)

    @property
    def dim(self) -> int:
        return int(np.prod(self.factor_dims))


def _as_layout(layout) -> SystemLayout:
    return layout if isinstance(layout, SystemLayout) else SystemLayout(tuple(layout))


def check_hermitian(m: np.ndarray, tol: float = HERM_TOL) -> np.ndarray:
    """Return ``m`` as a complex square array, raising if it is not Hermitian."""
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise QCoreError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] > MAX_DIM:
        raise QCoreError(f"dimension {m.shape[0]} exceeds guard {MAX_DIM}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.size and np.max(np.abs(m - m.conj().T)) > tol * scale:
        raise QCoreError("matrix is not Hermitian")
    return m


def dag(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def hermitize(m: np.ndarray) -> np.ndarray:
    """Symmetric part ``(m + m†)/2``."""
    return 0.5 * (m + dag(m))


def tensor(*mats: np.ndarray) -> np.ndarray:
    """Kronecker product of one or more matrices."""
    out = np.asarray(mats[0], dtype=complex)
    for b in mats[1:]:
        out = np.kron(out, np.asarray(b, dtype=complex))
    if out.shape[0] > MAX_DIM:
        raise QCoreError(f"tensor product dimension {out.shape[0]} exceeds guard {MAX_DIM}")
    return out


def partial_trace(m: np.ndarray, layout, keep: Iterable[int]) -> np.ndarray:
    """Trace out every factor of ``layout`` not listed in ``keep``.

    The kept factors appear in their original order.
    """
    layout = _as_layout(layout)
    m = np.asarray(m)
    dims = layout.factor_dims
    if m.shape != (layout.dim, layout.dim):
        raise QCoreError(f"matrix shape {m.shape} inconsistent with layout {dims}")
    keep = sorted(set(int(k) for k in keep))
    if any(k < 0 or k >= len(dims) for k in keep):
        raise QCoreError("keep index out of range")
    n = len(dims)
    t = m.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    if 2 * n > len(letters):
        raise QCoreError("too many tensor factors")
    rows = list(letters[:n])
    cols = list(letters[n:2 * n])
    for k in range(n):
        if k not in keep:
            cols[k] = rows[k]
    out = "".join(rows[k] for k in keep) + "".join(cols[k] for k in keep)
    res = np.einsum("".join(rows) + "".join(cols) + "->" + out, t)
    dk = int(np.prod([dims[k] for k in keep])) if keep else 1
    return res.reshape(dk, dk)


def eig_hermitian(m: np.ndarray):
    """Eigenvalues (ascending) and unitary eigenvectors of a Hermitian matrix.

    Uses LAPACK's Hermitian divide-and-conquer driver through numpy.
    """
    m = check_hermitian(m, tol=1e-9)
    w, v = np.linalg.eigh(hermitize(m))
    return w, v


def _clamped_eigh(m: np.ndarray, what: str):
    w, v = eig_hermitian(m)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w[0] < -NEG_TOL * scale:
        raise QCoreError(f"{what}: eigenvalue {w[0]:.3e} below -{NEG_TOL:g}")
    return np.clip(w, 0.0, None), v


def matrix_sqrt(m: np.ndarray) -> np.ndarray:
    """Principal square root of a PSD matrix (tiny negative eigenvalues clamp to 0)."""
    w, v = _clamped_eigh(m, "matrix_sqrt")
    return (v * np.sqrt(w)) @ dag(v)


def matrix_log2(m: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Base-2 logarithm on the support; eigenvalues at or below ``floor`` map to 0."""
    w, v = _clamped_eigh(m, "matrix_log2")
    lw = np.zeros_like(w)
    pos = w > floor
    lw[pos] = np.log2(w[pos])
    return (v * lw) @ dag(v)


def entropy_of_spectrum(w: np.ndarray, floor: float = EIG_FLOOR) -> float:
    """``-sum w log2 w`` with the ``0 log 0 = 0`` convention below ``floor``."""
    w = np.asarray(w, dtype=float)
    w = w[w > floor]
    return float(-np.sum(w * np.log2(w)))


def von_neumann_entropy(rho: np.ndarray) -> float:
    w, _ = _clamped_eigh(rho, "von_neumann_entropy")
    return entropy_of_spectrum(w)


def relative_entropy(rho: np.ndarray, sigma: np.ndarray, floor: float = EIG_FLOOR) -> float:
    """Umegaki relative entropy ``D(rho||sigma)`` in bits.

    :param rho: PSD matrix (need not be normalized).
    :param sigma: PSD matrix whose support must contain that of ``rho``.
    :raises QCoreError: on a support violation (infinite divergence).
    """
    wr, vr = _clamped_eigh(rho, "relative_entropy(rho)")
    ws, vs = _clamped_eigh(sigma, "relative_entropy(sigma)")
    # overlap |<r_i|s_j>|^2 carries rho's weight into sigma's eigenbasis
    ov = np.abs(dag(vr) @ vs) ** 2
    keep_r = wr > floor
    null_s = ws <= floor
    leak = float(np.sum(wr[keep_r][:, None] * ov[keep_r][:, null_s]))
    if leak > 1e-9 * max(1.0, float(np.sum(wr))):
        raise QCoreError("support of rho is not contained in support of sigma")
    logs = np.zeros_like(ws)
    logs[~null_s] = np.log2(ws[~null_s])
    rr = wr[keep_r]
    term1 = float(np.sum(rr * np.log2(rr)))
    term2 = float(np.sum(wr[keep_r][:, None] * ov[keep_r] * logs[None, :]))
    return term1 - term2


def conditional_entropy(rho: np.ndarray, layout, target: Sequence[int] | int,
                        conditioning: Sequence[int]) -> float:
    """``H(A|B) = H(AB) - H(B)`` for factor groups ``A = target``, ``B = conditioning``.

    Factors in neither group are traced out first.
    """
    layout = _as_layout(layout)
    target = [target] if np.isscalar(target) else list(target)
    conditioning = list(conditioning)
    if set(target) & set(conditioning):
        raise QCoreError("target and conditioning overlap")
    rho = check_hermitian(rho, tol=1e-9)
    joint = partial_trace(rho, layout, target + conditioning)
    if conditioning:
        marg = partial_trace(rho, layout, conditioning)
        return von_neumann_entropy(joint) - von_neumann_entropy(marg)
    return von_neumann_entropy(joint)


def pinch(m: np.ndarray, layout, classical_factor: int) -> np.ndarray:
    """Zero every block that is off-diagonal in ``classical_factor``'s basis."""
    layout = _as_layout(layout)
    dims = layout.factor_dims
    m = np.asarray(m, dtype=complex)
    if m.shape != (layout.dim, layout.dim):
        raise QCoreError(f"matrix shape {m.shape} inconsistent with layout {dims}")
    if not 0 <= classical_factor < len(dims):
        raise QCoreError("classical factor out of range")
    k = classical_factor
    n = len(dims)
    t = m.reshape(dims + dims).copy()
    d = dims[k]
    mask_shape = [1] * (2 * n)
    mask_shape[k] = d
    mask_shape[n + k] = d
    mask = np.eye(d).reshape(mask_shape)
    return (t * mask).reshape(m.shape)


def binary_entropy(x: float) -> float:
    """``h(x) = -x log2 x - (1-x) log2 (1-x)`` with ``h(0) = h(1) = 0``."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise QCoreError(f"binary_entropy argument {x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return 0.0
    return float(-x * np.log2(x) - (1.0 - x) * np.log2(1.0 - x))


def ket(index: int, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return v


def proj(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex).ravel()
    return np.outer(v, v.conj())


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random density matrix from the induced (Ginibre) measure."""
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    r = g @ dag(g)
    return r / np.trace(r).real


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return hermitize(g)
