"""Dense linear algebra shared by the learner and the analytic oracle.

Everything operates on plain float64 ndarrays: vectors are 1-D arrays,
matrices are 2-D row-major arrays. Direction sets are stored as matrix
*rows* (K x d). All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDirections,
    InsufficientSamples,
    NotOrthonormal,
    NotPsd,
    NotSymmetric,
)

DEGENERACY_RTOL = 1e-12  # relative residual below which GS input counts as rank-deficient
SYMMETRY_ATOL = 1e-10
PSD_RTOL = 1e-8  # eigenvalues below -PSD_RTOL*|lambda|_max are a hard error


@dataclass(frozen=True)
class Spectrum:
    """Symmetric eigendecomposition, eigenvalues sorted descending.

    ``eigenvectors`` holds the corresponding unit eigenvectors in its
    columns, so ``A = V diag(w) V^T``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def gram_schmidt(D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormalize the rows of D.

    Parameters
    ----------
    D : ndarray, shape (K, d)
        Raw directions as rows, K <= d, linearly independent.

    Returns
    -------
    W : ndarray, shape (K, d)
        Orthonormal rows; row k spans the same flag as rows 1..k of D.
    residual_norms : ndarray, shape (K,)
        ||d_k - sum_{l<k} (d_k^T w_l) w_l|| computed with the classical
        (single projection pass) expression.

    Raises
    ------
    DegenerateDirections
        If a residual norm falls below 1e-12 * ||d_k||.

    Notes
    -----
    Orthonormalization applies a second projection pass (classical
    Gram-Schmidt with reorthogonalization) for numerical stability, but
    the reported residual norms are always the classical first-pass
    values, which is what downstream variance estimates are defined on.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise ValueError(f"expected a 2-D array of row directions, got shape {D.shape}")
    K, d = D.shape
    if K > d:
        raise ValueError(f"cannot orthonormalize {K} rows in {d} dimensions")
    W = np.zeros((K, d))
    residual_norms = np.zeros(K)
    for k in range(K):
        dk = D[k]
        scale = float(np.linalg.norm(dk))
        r = dk - W[:k].T @ (W[:k] @ dk)
        residual_norms[k] = float(np.linalg.norm(r))
        if residual_norms[k] < DEGENERACY_RTOL * scale or residual_norms[k] == 0.0:
            raise DegenerateDirections(k, residual_norms[k], scale)
        # second pass cleans up the O(eps*kappa) loss of orthogonality
        r = r - W[:k].T @ (W[:k] @ r)
        W[k] = r / np.linalg.norm(r)
    return W, residual_norms


def eigh_sym(A: np.ndarray) -> Spectrum:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Raises NotSymmetric when max|A - A^T| exceeds 1e-10 * max(1, max|A|).
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))) if A.size else 0.0)
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > SYMMETRY_ATOL * scale:
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds tolerance for scale {scale:.3e}")
    w, V = np.linalg.eigh(A)
    order = np.argsort(w)[::-1]
    return Spectrum(eigenvalues=w[order], eigenvectors=V[:, order])


def sqrtm_psd(A: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root, B B = A.

    Eigenvalues in [-1e-8 * |lambda|_max, 0) are clamped to zero
    (numerical PSD drift); anything more negative raises NotPsd.
    """
    spec = eigh_sym(A)
    lam = spec.eigenvalues
    scale = float(np.max(np.abs(lam))) if lam.size else 0.0
    if lam.size and float(lam.min()) < -PSD_RTOL * scale:
        raise NotPsd(f"eigenvalue {lam.min():.3e} below -{PSD_RTOL:g} * {scale:.3e}")
    root = np.sqrt(np.clip(lam, 0.0, None))
    B = (spec.eigenvectors * root) @ spec.eigenvectors.T
    return 0.5 * (B + B.T)


def wasserstein2_gaussians(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> float:
    """Squared Wasserstein-2 distance between two Gaussians.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}).
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ValueError("mean/covariance dimensions do not match")
    root1 = sqrtm_psd(sigma1)
    inner = root1 @ np.asarray(sigma2, dtype=np.float64) @ root1
    cross = sqrtm_psd(0.5 * (inner + inner.T))
    d2 = float(np.sum((mu1 - mu2) ** 2)) + float(
        np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(cross)
    )
    # tiny negative values are pure roundoff
    return max(d2, 0.0)


def pca_from_samples(X: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-K principal directions and variances of a sample set.

    X has one sample per row; it is mean-centered internally. Returns
    (W, variances): rows of W are the top-K eigenvectors of the biased
    sample covariance (1/N) Xc^T Xc, variances the matching eigenvalues.
    """
    X = np.asarray(X, dtype=np.float64)
    N, d = X.shape
    if N < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {N}")
    if K > min(N - 1, d):
        raise InsufficientSamples(f"K={K} exceeds min(N-1, d)={min(N - 1, d)}")
    Xc = X - X.mean(axis=0)
    C = (Xc.T @ Xc) / N
    spec = eigh_sym(0.5 * (C + C.T))
    return spec.eigenvectors[:, :K].T.copy(), spec.eigenvalues[:K].copy()


def principal_angles(W1: np.ndarray, W2: np.ndarray) -> np.ndarray:
    """Principal angles (degrees, ascending) between two row-spanned subspaces."""
    for name, W in (("W1", W1), ("W2", W2)):
        G = W @ W.T
        err = float(np.max(np.abs(G - np.eye(W.shape[0]))))
        if err > 1e-6:
            raise NotOrthonormal(f"rows of {name} deviate from orthonormal by {err:.3e}")
    M = W1 @ W2.T
    lam = eigh_sym(M.T @ M).eigenvalues
    s = np.sqrt(np.clip(lam, 0.0, 1.0))
    angles = np.degrees(np.arccos(np.clip(s, 0.0, 1.0)))
    return np.sort(angles)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed d x d orthogonal matrix.

    Gram-Schmidt of a standard Gaussian matrix; the implicit positive
    residual norms fix the sign ambiguity, so the result is Haar.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    while True:
        G = rng.standard_normal((d, d))
        try:
            W, _ = gram_schmidt(G)
            return W
        except DegenerateDirections:  # pragma: no cover - probability zero
            continue
