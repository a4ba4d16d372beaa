import numpy as np
import pytest

from qkdgeat import qcore
from qkdgeat.qcore import QCoreError, SystemLayout


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_layout_rejects_zero_factor():
    with pytest.raises(QCoreError):
        SystemLayout((2, 0))


def test_partial_trace_of_product(rng):
    a = qcore.random_density(2, rng)
    b = qcore.random_density(3, rng)
    c = qcore.random_density(2, rng)
    m = qcore.tensor(a, b, c)
    assert np.allclose(qcore.partial_trace(m, (2, 3, 2), [1]), b)
    assert np.allclose(qcore.partial_trace(m, (2, 3, 2), [0, 2]), qcore.tensor(a, c))


def test_partial_trace_shape_mismatch():
    with pytest.raises(QCoreError):
        qcore.partial_trace(np.eye(5), (2, 2), [0])


def test_check_hermitian_flags_asymmetry():
    with pytest.raises(QCoreError):
        qcore.check_hermitian(np.array([[0, 1], [0, 0]], dtype=complex))


def test_entropy_of_maximally_mixed():
    for d in (2, 3, 8):
        assert qcore.von_neumann_entropy(np.eye(d) / d) == pytest.approx(np.log2(d), abs=1e-12)


def test_pure_state_has_zero_entropy(rng):
    assert qcore.von_neumann_entropy(qcore.random_density(4, rng, rank=1)) == pytest.approx(0, abs=1e-10)


def test_matrix_sqrt_squares_back(rng):
    m = qcore.random_density(5, rng)
    r = qcore.matrix_sqrt(m)
    assert np.allclose(r @ r, m, atol=1e-12)


def test_relative_entropy_classical():
    p, q = np.diag([0.7, 0.3]), np.diag([0.5, 0.5])
    expected = 0.7 * np.log2(0.7 / 0.5) + 0.3 * np.log2(0.3 / 0.5)
    assert qcore.relative_entropy(p, q) == pytest.approx(expected, abs=1e-12)


def test_relative_entropy_support_violation():
    with pytest.raises(QCoreError):
        qcore.relative_entropy(np.diag([0.5, 0.5]), np.diag([1.0, 0.0]))


def test_relative_entropy_nonnegative(rng):
    for _ in range(20):
        a, b = qcore.random_density(4, rng), qcore.random_density(4, rng)
        assert qcore.relative_entropy(a, b) >= -1e-12


def test_conditional_entropy_of_bell_state():
    bell = np.array([1, 0, 0, 1]) / np.sqrt(2)
    rho = qcore.proj(bell)
    assert qcore.conditional_entropy(rho, (2, 2), 0, [1]) == pytest.approx(-1.0, abs=1e-12)


def test_pinch_keeps_diagonal_blocks(rng):
    m = qcore.random_density(6, rng)
    pm = qcore.pinch(m, (3, 2), 0)
    t = pm.reshape(3, 2, 3, 2)
    assert np.allclose(t[0, :, 1, :], 0)
    assert np.allclose(np.trace(pm), 1)
    assert np.allclose(t[2, :, 2, :], m.reshape(3, 2, 3, 2)[2, :, 2, :])


def test_pinching_is_idempotent(rng):
    m = qcore.random_density(8, rng)
    once = qcore.pinch(m, (2, 2, 2), 1)
    assert np.allclose(qcore.pinch(once, (2, 2, 2), 1), once)


def test_binary_entropy_endpoints():
    assert qcore.binary_entropy(0) == 0
    assert qcore.binary_entropy(0.5) == pytest.approx(1.0)
    with pytest.raises(QCoreError):
        qcore.binary_entropy(1.5)
