"""Dense linear algebra kernels with deterministic conventions.

All routines operate on 2-D float64 arrays and are pure functions of their
inputs. Eigen- and singular decompositions apply fixed sign conventions so
that identical input bytes always produce identical output bytes, which the
conversion pipeline relies on for reproducible artifacts.
"""

from typing import NamedTuple

import numpy as np

from .errors import NumericalError, ValidationError

# Relative symmetry slack accepted before symmetrizing internally.
SYMMETRY_TOL = 1e-8
# Negative eigenvalues above -PSD_CLAMP_REL * lambda_max count as rounding noise.
PSD_CLAMP_REL = 1e-8
# Entries below this magnitude are ignored when picking the sign anchor of a
# singular vector.
_SIGN_EPS = 1e-12


class SvdResult(NamedTuple):
    u: np.ndarray
    singular_values: np.ndarray
    v_t: np.ndarray


class EigResult(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(
            f"dimension mismatch: cannot multiply {a.shape} by {b.shape}"
        )
    return a @ b


def frobenius_norm_sq(a) -> float:
    """Sum of squared entries."""
    a = as_matrix(a, "a")
    return float(np.vdot(a, a))


def sym_eig(s) -> EigResult:
    """Eigendecomposition of a symmetric matrix, eigenvalues non-increasing.

    Sign convention: in each eigenvector the entry of largest magnitude is
    made positive, ties broken by lowest row index. The input is symmetrized
    as (S + S^T)/2 before decomposing.
    """
    s = as_matrix(s, "s")
    if s.shape[0] != s.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s))) if s.size else 0.0)
    if s.size and float(np.max(np.abs(s - s.T))) > SYMMETRY_TOL * scale:
        raise ValidationError("input is not symmetric")
    sym = (s + s.T) / 2.0
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from None
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    for j in range(vecs.shape[1]):
        anchor = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[anchor, j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return EigResult(vals, vecs)


def sqrt_psd(s) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-PSD_CLAMP_REL * lambda_max, 0) are clamped to zero;
    anything more negative means the input is genuinely not PSD.
    """
    res = sym_eig(s)
    vals = res.eigenvalues
    lam_max = max(float(vals[0]) if vals.size else 0.0, 0.0)
    if vals.size and float(vals[-1]) < -PSD_CLAMP_REL * lam_max:
        raise NumericalError(
            f"matrix is not PSD: eigenvalue {vals[-1]:g} below clamp threshold"
        )
    root = (res.eigenvectors * np.sqrt(np.clip(vals, 0.0, None))) @ res.eigenvectors.T
    return (root + root.T) / 2.0


def inv_sqrt_psd(s, min_eig: float) -> np.ndarray:
    """Inverse square root of a symmetric positive definite matrix.

    Refuses inputs with any eigenvalue below `min_eig`; callers are expected
    to shrinkage-regularize first.
    """
    if not min_eig > 0.0:
        raise ValidationError("min_eig must be positive")
    res = sym_eig(s)
    if not res.eigenvalues.size or float(res.eigenvalues[-1]) < min_eig:
        low = float(res.eigenvalues[-1]) if res.eigenvalues.size else 0.0
        raise NumericalError(
            f"singular input: eigenvalue {low:g} below {min_eig:g} "
            "(apply shrinkage first)"
        )
    inv_root = (res.eigenvectors * res.eigenvalues**-0.5) @ res.eigenvectors.T
    return (inv_root + inv_root.T) / 2.0


def svd(a) -> SvdResult:
    """Singular value decomposition with a deterministic sign convention.

    In each column of U the first entry with magnitude above 1e-12 is made
    positive and the matching row of V^T is flipped in tandem.
    """
    a = as_matrix(a, "a")
    try:
        u, sing, v_t = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge: {exc}") from None
    u = u.copy()
    v_t = v_t.copy()
    for j in range(u.shape[1]):
        significant = np.nonzero(np.abs(u[:, j]) > _SIGN_EPS)[0]
        if significant.size and u[significant[0], j] < 0.0:
            u[:, j] = -u[:, j]
            v_t[j, :] = -v_t[j, :]
    return SvdResult(u, sing.copy(), v_t)


def truncate_svd(res: SvdResult, r: int) -> SvdResult:
    """Keep the top-r singular triplets."""
    p = int(res.singular_values.shape[0])
    if not 1 <= r <= p:
        raise ValidationError(f"rank {r} out of range [1, {p}]")
    return SvdResult(
        res.u[:, :r].copy(),
        res.singular_values[:r].copy(),
        res.v_t[:r, :].copy(),
    )


def reconstruct(res: SvdResult) -> np.ndarray:
    """Multiply the factors back together: U diag(sigma) V^T."""
    return (res.u * res.singular_values) @ res.v_t
