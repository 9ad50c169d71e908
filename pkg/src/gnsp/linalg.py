"""Dense linear-algebra kernel: products, norms, symmetric eigendecomposition,
stable softmax, and KL divergence.

Everything operates on 2-D float64 numpy arrays and is a pure function of its
inputs. The eigendecomposition doubles as the SVD for the symmetric PSD gram
matrices used elsewhere (for those, U = V and singular values = eigenvalues).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Eigenvalues within this relative distance of zero are clamped to exactly 0,
# so that rank/null-space decisions are stable against round-off.
EIG_ZERO_CLAMP = 1e-10

# Maximum tolerated asymmetry |M - M^T| before sym_eig refuses the input.
SYMMETRY_TOL = 1e-9


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class EigenConvergenceError(RuntimeError):
    """The eigensolver failed to converge."""


def as_matrix(data, *, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D float64 array with finite entries."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


@dataclass
class EigenSpectrum:
    """Eigendecomposition of a symmetric matrix.

    values are sorted non-increasing; column j of `vectors` is the unit
    eigenvector for values[j]. For PSD input all values are >= 0 after
    clamping.
    """

    values: np.ndarray   # (d,)
    vectors: np.ndarray  # (d, d), column-orthonormal


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) x "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def frobenius_norm(m: np.ndarray) -> float:
    """sqrt(sum of squared entries)."""
    return float(np.sqrt(np.sum(np.asarray(m, dtype=np.float64) ** 2)))


def sym_eig(m: np.ndarray, *, zero_clamp: float = EIG_ZERO_CLAMP) -> EigenSpectrum:
    """Eigendecomposition of a (numerically) symmetric matrix.

    The input is symmetrized as (M + M^T)/2 before factorization; an asymmetry
    defect above SYMMETRY_TOL is rejected. Eigenvalues within
    zero_clamp * max|eigenvalue| of zero come back as exactly 0, which keeps
    the PSD gram matrices used downstream free of round-off negatives.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatchError(f"sym_eig needs a square matrix, got {m.shape}")
    if m.size:
        defect = float(np.max(np.abs(m - m.T)))
        if defect > SYMMETRY_TOL:
            raise ValueError(
                f"input is not symmetric: max|M - M^T| = {defect:.3e} > {SYMMETRY_TOL}"
            )
    sym = 0.5 * (m + m.T)
    try:
        values, vectors = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eigh rarely fails
        raise EigenConvergenceError(
            f"eigendecomposition failed for {m.shape} matrix "
            f"(Frobenius norm {frobenius_norm(sym):.3e}): {exc}"
        ) from exc
    # eigh returns ascending order; flip to non-increasing.
    values = np.ascontiguousarray(values[::-1])
    vectors = np.ascontiguousarray(vectors[:, ::-1])
    if values.size:
        threshold = zero_clamp * float(np.max(np.abs(values)))
        values[np.abs(values) <= threshold] = 0.0
    return EigenSpectrum(values=values, vectors=vectors)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs a 2-D array, got {z.shape}")
    shifted = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def kl_rows(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Sum over rows of KL(softmax(p_row) || softmax(q_row)).

    A sum, not a mean: the value scales with the number of rows.
    """
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise ShapeMismatchError(
            f"kl_rows shape mismatch: {p_logits.shape} vs {q_logits.shape}"
        )
    p = softmax_rows(p_logits)
    log_p = _log_softmax_rows(p_logits)
    log_q = _log_softmax_rows(q_logits)
    terms = np.where(p > 0.0, p * (log_p - log_q), 0.0)
    return float(np.sum(terms))


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by max(||row||_2, eps); zero rows pass through."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.sum(m * m, axis=1, keepdims=True))
    return m / np.maximum(norms, eps)


def l2_normalize_rows_backward(
    d_normalized: np.ndarray, raw: np.ndarray, eps: float = 1e-12
) -> np.ndarray:
    """Pull a gradient back through l2_normalize_rows.

    Uses the full Jacobian (I - uu^T)/||x|| per row; rows with norm below eps
    get zero gradient.
    """
    norms = np.sqrt(np.sum(raw * raw, axis=1, keepdims=True))
    safe = np.maximum(norms, eps)
    u = raw / safe
    dots = np.sum(d_normalized * u, axis=1, keepdims=True)
    d_raw = (d_normalized - dots * u) / safe
    d_raw[norms[:, 0] < eps] = 0.0
    return d_raw


def cosine_sim_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """S with S[i, j] = cos(a_i, b_j); rows are normalized internally."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"cosine_sim_matrix needs matching feature dims, got {a.shape} and {b.shape}"
        )
    return l2_normalize_rows(a) @ l2_normalize_rows(b).T
