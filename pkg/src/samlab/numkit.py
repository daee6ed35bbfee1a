"""Small dense linear-algebra kit for symmetric matrices.

Everything downstream (landscapes, metrics, closed-form dynamics) funnels its
eigen/spd work through this module so that results are bit-stable across runs:
eigenvectors carry a deterministic sign convention, and SPD checks use a single
floor constant.

Matrices are plain float64 numpy arrays; "symmetric" means entries match their
transpose to 1e-12 relative to the matrix scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative tolerance for accepting a matrix as symmetric.
SYM_TOL = 1e-12
# Eigenvalues at or below this floor disqualify a matrix from SPD operations.
SPD_FLOOR = 1e-12
# Components smaller than this are treated as zero by the sign convention.
_SIGN_EPS = 1e-12


def max_asymmetry(m: np.ndarray) -> float:
    """Largest absolute entry of (M - M^T)."""
    m = np.asarray(m, dtype=float)
    return float(np.max(np.abs(m - m.T))) if m.size else 0.0


def check_symmetric(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate shape and symmetry; return the symmetrized float64 array."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square 2-D, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    asym = max_asymmetry(m)
    if asym > SYM_TOL * scale:
        raise ValueError(
            f"{name} is not symmetric: max |M - M^T| = {asym:.3e} "
            f"(tolerance {SYM_TOL * scale:.3e})"
        )
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class EigenDecomp:
    """Eigendecomposition of a symmetric matrix.

    eigenvalues are ascending; eigenvectors[:, i] pairs with eigenvalues[i]
    and has its first component of magnitude > 1e-12 made positive.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: first non-negligible component > 0."""
    v = vectors.copy()
    for j in range(v.shape[1]):
        col = v[:, j]
        nz = np.nonzero(np.abs(col) > _SIGN_EPS)[0]
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    return v


def sym_eig(m: np.ndarray) -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix, ascending, sign-fixed."""
    m = check_symmetric(m)
    vals, vecs = np.linalg.eigh(m)
    return EigenDecomp(eigenvalues=vals, eigenvectors=_fix_signs(vecs))


def _spd_eig(m: np.ndarray, name: str) -> EigenDecomp:
    dec = sym_eig(m)
    lo = float(dec.eigenvalues[0])
    if lo <= SPD_FLOOR:
        raise ValueError(
            f"{name} is not positive definite: smallest eigenvalue "
            f"{lo:.6e} <= floor {SPD_FLOOR:.1e}"
        )
    return dec


def spd_inv_sqrt(m: np.ndarray) -> np.ndarray:
    """M^(-1/2) for symmetric positive definite M."""
    dec = _spd_eig(m, "spd_inv_sqrt input")
    v = dec.eigenvectors
    out = (v / np.sqrt(dec.eigenvalues)) @ v.T
    return 0.5 * (out + out.T)


def spd_sqrt(m: np.ndarray) -> np.ndarray:
    """M^(1/2) for symmetric positive definite M."""
    dec = _spd_eig(m, "spd_sqrt input")
    v = dec.eigenvectors
    out = (v * np.sqrt(dec.eigenvalues)) @ v.T
    return 0.5 * (out + out.T)


def spd_inv(m: np.ndarray) -> np.ndarray:
    """M^(-1) for symmetric positive definite M."""
    dec = _spd_eig(m, "spd_inv input")
    v = dec.eigenvectors
    out = (v / dec.eigenvalues) @ v.T
    return 0.5 * (out + out.T)


def quad_form(v: np.ndarray, m: np.ndarray) -> float:
    """v^T M v with shape validation (M symmetric)."""
    v = np.asarray(v, dtype=float)
    m = check_symmetric(m, "quad_form matrix")
    if v.ndim != 1 or v.shape[0] != m.shape[0]:
        raise ValueError(
            f"vector shape {v.shape} incompatible with matrix {m.shape}"
        )
    return float(v @ m @ v)


def commutator_norm(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius norm of AB - BA."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a @ b - b @ a, "fro"))
