"""Dense kernels: compact SVD of short-and-wide matrices, random orthonormal
bases and cosine similarity.

Everything works in float64. Random numbers come from numpy's ``PCG64``
bit generator (``numpy.random.default_rng``); seeds are fed through
``numpy.random.SeedSequence`` so derived seeds are stable across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from itss.errors import InvalidInputError, ShapeError, UndefinedSimilarityError

EPS = np.finfo(np.float64).eps

# Relative singular-value cutoff below which directions are dropped.
RANK_RTOL = 1e-10
JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 64


@dataclass(frozen=True)
class SvdResult:
    """Compact SVD ``w = left @ diag(singular_values) @ right.T``.

    ``left`` is t x r, ``right`` is D x r and ``r`` is the numerical rank.
    """

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.singular_values.shape[0])


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return m


def jacobi_eigh(g: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue.
    Iteration stops once the off-diagonal Frobenius norm drops below
    ``tol * trace`` (for PSD input the trace bounds the spectral scale).
    """
    a = np.array(g, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    v = np.eye(n)
    scale = abs(np.trace(a))
    if scale == 0.0:
        scale = np.abs(a).sum()
    if n < 2 or scale == 0.0:
        return _sorted_eig(np.diag(a).copy(), v)
    thresh = tol * scale

    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.sqrt(np.sum(a[offdiag] ** 2)) < thresh:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                app, aqq = a[p, p], a[q, q]
                if abs(apq) <= EPS * EPS * scale:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J with J the (p, q) plane rotation
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return _sorted_eig(np.diag(a).copy(), v)


def _sorted_eig(vals, vecs):
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def gram_noise_floor(t: int) -> float:
    """Smallest trustworthy relative singular value when squaring through W W^T.

    Eigenvalues of the Gram matrix carry absolute error of roughly
    ``t * eps * lambda_1``; a singular value below the square root of that is
    indistinguishable from zero.
    """
    return float(np.sqrt(16.0 * max(t, 1) * EPS))


def mgs_orthonormalize(a: np.ndarray, passes: int = 2) -> np.ndarray:
    """Modified Gram-Schmidt over columns, repeated ``passes`` times."""
    q = np.array(a, dtype=np.float64, copy=True)
    for _ in range(passes):
        for j in range(q.shape[1]):
            for i in range(j):
                q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
            nrm = np.linalg.norm(q[:, j])
            if nrm == 0.0:
                raise InvalidInputError(f"column {j} is linearly dependent")
            q[:, j] /= nrm
    return q


def compact_svd(w, rtol: float = RANK_RTOL) -> SvdResult:
    """Compact SVD of a t x D matrix with t <= D.

    The t x t Gram matrix ``w @ w.T`` is eigendecomposed with cyclic Jacobi;
    right vectors are recovered as ``w.T @ u_j / sigma_j`` and then polished
    with one re-orthogonalization sweep so they stay orthonormal even when the
    spectrum decays steeply. Directions with ``sigma_j <= rtol * sigma_1`` or
    below the Gram noise floor are dropped.
    """
    w = as_matrix(w, "w")
    t, d = w.shape
    if t > d:
        raise ShapeError(f"compact_svd expects t <= D, got {t} x {d}")
    g = w @ w.T
    g = 0.5 * (g + g.T)
    lam, u = jacobi_eigh(g)
    lam = np.clip(lam, 0.0, None)
    sig = np.sqrt(lam)
    if t == 0 or sig[0] == 0.0:
        return SvdResult(np.zeros((t, 0)), np.zeros(0), np.zeros((d, 0)))
    cutoff = max(rtol, gram_noise_floor(t)) * sig[0]
    keep = sig > cutoff
    sig = sig[keep]
    u = u[:, keep]
    v = (w.T @ u) / sig
    v = mgs_orthonormalize(v, passes=1)
    return SvdResult(left=u, singular_values=sig, right=v)


def orthonormal_random(rows: int, cols: int, seed) -> np.ndarray:
    """D x d matrix with orthonormal columns spanning a random subspace.

    Gaussian fill from ``default_rng(seed)`` followed by modified Gram-Schmidt
    with one re-orthogonalization pass.
    """
    if cols > rows:
        raise ShapeError(f"cannot fit {cols} orthonormal columns in R^{rows}")
    if cols < 0 or rows < 0:
        raise ShapeError("negative dimension")
    rng = np.random.default_rng(seed)
    fill = rng.standard_normal((rows, cols))
    return mgs_orthonormalize(fill, passes=2)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine of a zero vector is undefined")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
