"""Symmetric linear-algebra helpers: decompositions, SPD transforms, checks."""
import numpy as np
import pytest

from samlab import numkit


def _random_symmetric(rng, dim):
    m = rng.standard_normal((dim, dim))
    return 0.5 * (m + m.T)


def _random_spd(rng, dim):
    m = rng.standard_normal((dim, dim))
    return m @ m.T + dim * np.eye(dim)


def test_max_asymmetry_zero_for_symmetric():
    rng = np.random.default_rng(0)
    m = _random_symmetric(rng, 5)
    assert numkit.max_asymmetry(m) == 0.0


def test_max_asymmetry_reports_largest_entry_gap():
    m = np.zeros((3, 3))
    m[0, 2] = 0.25
    assert numkit.max_asymmetry(m) == 0.25


def test_check_symmetric_rejects_nonsquare():
    with pytest.raises(ValueError, match="square"):
        numkit.check_symmetric(np.zeros((2, 3)))


def test_check_symmetric_rejects_asymmetric():
    m = np.eye(3)
    m[0, 1] = 1e-6
    with pytest.raises(ValueError, match="not symmetric"):
        numkit.check_symmetric(m)


def test_check_symmetric_returns_symmetrized_copy():
    m = np.eye(2) + 1e-14 * np.array([[0.0, 1.0], [0.0, 0.0]])
    out = numkit.check_symmetric(m)
    assert numkit.max_asymmetry(out) == 0.0
    np.testing.assert_allclose(out, np.eye(2), atol=1e-13)


def test_sym_eig_ascending_and_reconstructs():
    rng = np.random.default_rng(1)
    for dim in (2, 3, 6):
        m = _random_symmetric(rng, dim)
        dec = numkit.sym_eig(m)
        assert np.all(np.diff(dec.eigenvalues) >= 0)
        np.testing.assert_allclose(dec.reconstruct(), m, atol=1e-12)
        # columns orthonormal
        np.testing.assert_allclose(dec.eigenvectors.T @ dec.eigenvectors,
                                   np.eye(dim), atol=1e-12)


def test_sym_eig_sign_convention():
    rng = np.random.default_rng(2)
    m = _random_symmetric(rng, 5)
    vecs = numkit.sym_eig(m).eigenvectors
    for j in range(5):
        col = vecs[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        assert col[nz[0]] > 0


def test_sym_eig_deterministic():
    rng = np.random.default_rng(3)
    m = _random_symmetric(rng, 4)
    d1, d2 = numkit.sym_eig(m), numkit.sym_eig(m)
    assert np.array_equal(d1.eigenvalues, d2.eigenvalues)
    assert np.array_equal(d1.eigenvectors, d2.eigenvectors)


def test_spd_sqrt_squares_back():
    rng = np.random.default_rng(4)
    m = _random_spd(rng, 5)
    root = numkit.spd_sqrt(m)
    np.testing.assert_allclose(root @ root, m, rtol=1e-10)
    assert numkit.max_asymmetry(root) == 0.0


def test_spd_inv_sqrt_inverts_sqrt():
    rng = np.random.default_rng(5)
    m = _random_spd(rng, 4)
    prod = numkit.spd_sqrt(m) @ numkit.spd_inv_sqrt(m)
    np.testing.assert_allclose(prod, np.eye(4), atol=1e-12)


def test_spd_inv_matches_numpy_inverse():
    rng = np.random.default_rng(6)
    m = _random_spd(rng, 6)
    np.testing.assert_allclose(numkit.spd_inv(m), np.linalg.inv(m),
                               rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("fn", [numkit.spd_sqrt, numkit.spd_inv_sqrt,
                                numkit.spd_inv])
def test_spd_transforms_reject_indefinite(fn):
    m = np.diag([1.0, -0.5])
    with pytest.raises(ValueError, match="positive definite"):
        fn(m)


@pytest.mark.parametrize("fn", [numkit.spd_sqrt, numkit.spd_inv_sqrt,
                                numkit.spd_inv])
def test_spd_transforms_reject_singular(fn):
    m = np.diag([1.0, 0.0])
    with pytest.raises(ValueError, match="positive definite"):
        fn(m)


def test_quad_form_matches_direct_product():
    rng = np.random.default_rng(7)
    m = _random_symmetric(rng, 5)
    v = rng.standard_normal(5)
    assert numkit.quad_form(v, m) == pytest.approx(float(v @ m @ v), rel=1e-14)


def test_quad_form_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="incompatible"):
        numkit.quad_form(np.zeros(3), np.eye(2))


def test_commutator_norm_zero_for_codiagonal_pair():
    a = np.diag([1.0, 2.0, 3.0])
    b = np.diag([5.0, 4.0, 9.0])
    assert numkit.commutator_norm(a, b) == 0.0


def test_commutator_norm_positive_for_rotated_pair():
    rng = np.random.default_rng(8)
    a = np.diag([1.0, 2.0])
    b = _random_spd(rng, 2)
    assert numkit.commutator_norm(a, b) > 1e-3
