"""Evaluation metrics: W2 report tables, residuals, RMSE, angles, curves.

A "method" is any callable (y, K) -> GaussianMoments. The report
compares each method cell against the ground-truth posterior moments,
with the reference covariance truncated to rank K per column (the full
covariance is available behind ``truncate_reference=False`` for
sensitivity analysis).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientSamples, NotOrthonormal, NotPsd
from .gmm import GaussianMoments, rank_k_truncation
from .linalg import pca_from_samples, wasserstein2_gaussians
from .models import NppcOutput


@dataclass(frozen=True)
class ScaledPcFactor:
    """Matrix with sigma_k * w_k in column k, so cov = F F^T."""

    matrix: np.ndarray


def scaled_pc_factor(output: NppcOutput, K: int | None = None) -> ScaledPcFactor:
    K = output.W.shape[0] if K is None else K
    sig = np.sqrt(np.clip(output.sigma2[:K], 0.0, None))
    return ScaledPcFactor(matrix=(output.W[:K].T * sig))


def nppc_gaussian(xhat: np.ndarray, output: NppcOutput, K: int | None = None) -> GaussianMoments:
    """Gaussian implied by the head: mean x_hat, covariance sum sigma_k^2 w_k w_k^T."""
    F = scaled_pc_factor(output, K).matrix
    cov = F @ F.T
    return GaussianMoments(mean=np.asarray(xhat, dtype=np.float64), cov=0.5 * (cov + cov.T))


@dataclass
class W2Report:
    """Mean squared W2 distances per (method, K) over a test set."""

    methods: list[str]
    k_list: list[int]
    cells: np.ndarray  # (n_methods, n_k) means
    sems: np.ndarray  # standard errors of the means
    per_point: np.ndarray  # (n_methods, n_k, n_test)
    n_test: int
    seed: int | None = None
    poisoned: list[tuple[str, int]] = field(default_factory=list)

    def cell(self, method: str, K: int) -> float:
        return float(self.cells[self.methods.index(method), self.k_list.index(K)])


def w2_table(
    oracle_moments_fn,
    methods: dict[str, object],
    test_ys: np.ndarray,
    k_list: list[int],
    truncate_reference: bool = True,
    threads: int = 1,
    seed: int | None = None,
) -> W2Report:
    """Mean W2^2 between each method's Gaussian and the GT posterior.

    Per test point the GT covariance is truncated to rank K for column K
    (matching the method's rank budget). A failing cell poisons only
    itself: it is reported as NaN and listed in ``poisoned``.
    """
    if len(test_ys) == 0:
        raise InsufficientSamples("need at least one test point")
    names = list(methods)
    per_point = np.zeros((len(names), len(k_list), len(test_ys)))

    def one_point(idx: int) -> np.ndarray:
        y = test_ys[idx]
        gt = oracle_moments_fn(y)
        out = np.zeros((len(names), len(k_list)))
        for j, K in enumerate(k_list):
            ref_cov = rank_k_truncation(gt.cov, K) if truncate_reference else gt.cov
            for i, name in enumerate(names):
                try:
                    mom = methods[name](y, K)
                    out[i, j] = wasserstein2_gaussians(gt.mean, ref_cov, mom.mean, mom.cov)
                except (NotPsd, FloatingPointError, np.linalg.LinAlgError):
                    out[i, j] = np.nan
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_point, range(len(test_ys))))
    else:
        results = [one_point(i) for i in range(len(test_ys))]
    for idx, r in enumerate(results):
        per_point[:, :, idx] = r

    cells = per_point.mean(axis=2)
    sems = per_point.std(axis=2, ddof=1) / np.sqrt(len(test_ys)) if len(test_ys) > 1 else (
        np.zeros_like(cells)
    )
    poisoned = [
        (names[i], k_list[j])
        for i in range(len(names))
        for j in range(len(k_list))
        if np.any(np.isnan(per_point[i, j]))
    ]
    return W2Report(
        methods=names,
        k_list=list(k_list),
        cells=cells,
        sems=sems,
        per_point=per_point,
        n_test=len(test_ys),
        seed=seed,
        poisoned=poisoned,
    )


def point_mass_method(oracle_moments_fn):
    """Table baseline: GT posterior mean with zero covariance."""

    def method(y, K):
        gt = oracle_moments_fn(y)
        d = gt.mean.shape[0]
        return GaussianMoments(mean=gt.mean, cov=np.zeros((d, d)))

    return method


def nppc_method(mean_model, head):
    """Evaluation adapter: head's top-K directions around the model mean."""

    def method(y, K):
        xhat = mean_model.predict(y)
        out = head.predict(y, xhat)
        return nppc_gaussian(xhat, out, K=min(K, out.W.shape[0]))

    return method


def _check_rows_orthonormal(W: np.ndarray) -> None:
    G = W @ W.T
    err = float(np.max(np.abs(G - np.eye(W.shape[0]))))
    if err > 1e-6:
        raise NotOrthonormal(f"rows deviate from orthonormal by {err:.3e}")


def residual_norm(e: np.ndarray, W: np.ndarray) -> float:
    """||e - W^T W e||: error energy outside the row span of W."""
    _check_rows_orthonormal(W)
    r = e - W.T @ (W @ e)
    return float(np.linalg.norm(r))


def captured_energy(e: np.ndarray, W: np.ndarray) -> float:
    """sum_k |w_k^T e|^2 (complements residual_norm^2 to ||e||^2)."""
    return float(np.sum((W @ e) ** 2))


def rmse(xhat: np.ndarray, x: np.ndarray) -> float:
    """Root mean squared error norm: sqrt(mean_i ||x_i - xhat_i||^2).

    Accepts a single pair of vectors or stacked sets (one row each).
    """
    xhat = np.atleast_2d(np.asarray(xhat, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return float(np.sqrt(np.mean(np.sum((x - xhat) ** 2, axis=1))))


def unexplained_curve(errors: list[np.ndarray], w_list) -> np.ndarray:
    """Fraction of total error energy outside the top-K subspace, K = 0..K_max.

    ``w_list`` is either one shared direction matrix or one per error.
    """
    if len(errors) == 0:
        raise ValueError("need at least one error vector")
    Ws = w_list if isinstance(w_list, list) else [w_list] * len(errors)
    k_max = min(W.shape[0] for W in Ws)
    total = sum(float(np.sum(e * e)) for e in errors)
    curve = np.empty(k_max + 1)
    curve[0] = 1.0
    for K in range(1, k_max + 1):
        left = sum(residual_norm(e, W[:K]) ** 2 for e, W in zip(errors, Ws))
        curve[K] = left / total
    return curve


def sample_pca_baseline(
    sampler, y: np.ndarray, m: int, K: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and top-K PCA of m posterior samples drawn by ``sampler(y, m)``."""
    if m <= K:
        raise InsufficientSamples(f"need m > K, got m={m}, K={K}")
    samples = np.asarray(sampler(y, m), dtype=np.float64)
    W, variances = pca_from_samples(samples, K)
    return samples.mean(axis=0), W, variances
