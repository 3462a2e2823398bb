"""Gaussian-mixture prior, additive-noise observations, exact posterior.

The generative world is y = x + n with x drawn from a Gaussian mixture
and n isotropic Gaussian noise. Conditioning each component on y gives

    q_l        = N(y; mu_l, Sigma_l + sig^2 I)
    mu~_l      = mu_l + Sigma_l (Sigma_l + sig^2 I)^{-1} (y - mu_l)
    Sigma~_l   = Sigma_l - Sigma_l (Sigma_l + sig^2 I)^{-1} Sigma_l

so the posterior is again a mixture with responsibilities prop. to
pi_l q_l, and its first two moments follow from the standard mixture
identities. All densities are evaluated in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularSolve
from .linalg import eigh_sym


@dataclass(frozen=True)
class GaussianMixture:
    """weights (L,), means (L, d), covs (L, d, d); covs symmetric PSD."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=np.float64))
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        for c in self.covs:
            if np.max(np.abs(c - c.T)) > 1e-10 * max(1.0, np.max(np.abs(c))):
                raise ValueError("component covariances must be symmetric")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def prior_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the mixture itself."""
        mu = self.weights @ self.means
        cov = np.zeros((self.dim, self.dim))
        for w, m, c in zip(self.weights, self.means, self.covs):
            dm = m - mu
            cov += w * (c + np.outer(dm, dm))
        return mu, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic additive observation noise, std sigma_eps > 0."""

    sigma_eps: float

    def __post_init__(self):
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be > 0")


@dataclass(frozen=True)
class PosteriorComponents:
    responsibilities: np.ndarray  # (L,), sums to 1
    means: np.ndarray  # (L, d) conditioned component means
    covs: np.ndarray  # (L, d, d) conditioned component covariances


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    spec = eigh_sym(0.5 * (cov + cov.T))
    return spec.eigenvectors * np.sqrt(np.clip(spec.eigenvalues, 0.0, None))


class PosteriorOracle:
    """Precomputed conditioning data for one (mixture, noise) pair.

    Component-level quantities that do not depend on y (conditioned
    covariances, solve factors, log-determinants) are computed once, so
    per-measurement queries stay cheap in evaluation loops.
    """

    def __init__(self, mix: GaussianMixture, noise: NoiseModel):
        self.mix = mix
        self.noise = noise
        d = mix.dim
        var = noise.sigma_eps**2
        self._solve_vecs = []  # eigenvectors of Sigma_l + var I
        self._solve_vals = []
        self._logdets = []
        self._gains = []  # Sigma_l (Sigma_l + var I)^{-1}
        self.cond_covs = np.zeros_like(mix.covs)
        self._cond_sqrts = []
        for l in range(mix.n_components):
            spec = eigh_sym(mix.covs[l] + var * np.eye(d))
            if float(spec.eigenvalues.min()) <= 0.0:
                raise SingularSolve("Sigma + sigma_eps^2 I is not positive definite")
            self._solve_vecs.append(spec.eigenvectors)
            self._solve_vals.append(spec.eigenvalues)
            self._logdets.append(float(np.sum(np.log(spec.eigenvalues))))
            inv = (spec.eigenvectors / spec.eigenvalues) @ spec.eigenvectors.T
            gain = mix.covs[l] @ inv
            self._gains.append(gain)
            cond = mix.covs[l] - gain @ mix.covs[l]
            self.cond_covs[l] = 0.5 * (cond + cond.T)
            self._cond_sqrts.append(_psd_sqrt(self.cond_covs[l]))

    def components(self, y: np.ndarray) -> PosteriorComponents:
        y = np.asarray(y, dtype=np.float64)
        mix = self.mix
        d = mix.dim
        logr = np.zeros(mix.n_components)
        cond_means = np.zeros_like(mix.means)
        for l in range(mix.n_components):
            diff = y - mix.means[l]
            u = self._solve_vecs[l].T @ diff
            maha = float(np.sum(u * u / self._solve_vals[l]))
            logq = -0.5 * (d * np.log(2.0 * np.pi) + self._logdets[l] + maha)
            logr[l] = logq + np.log(mix.weights[l])
            cond_means[l] = mix.means[l] + self._gains[l] @ diff
        logr -= logr.max()
        r = np.exp(logr)
        r /= r.sum()
        return PosteriorComponents(responsibilities=r, means=cond_means, covs=self.cond_covs)

    def moments(self, y: np.ndarray) -> GaussianMoments:
        comp = self.components(y)
        mu = comp.responsibilities @ comp.means
        cov = np.zeros((self.mix.dim, self.mix.dim))
        for r, m, c in zip(comp.responsibilities, comp.means, comp.covs):
            dm = m - mu
            cov += r * (c + np.outer(dm, dm))
        return GaussianMoments(mean=mu, cov=0.5 * (cov + cov.T))

    def sample(self, y: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
        """m exact draws from the posterior mixture."""
        if m < 1:
            raise ValueError("need m >= 1 samples")
        comp = self.components(y)
        ks = rng.choice(self.mix.n_components, size=m, p=comp.responsibilities)
        z = rng.standard_normal((m, self.mix.dim))
        out = np.empty((m, self.mix.dim))
        for l in range(self.mix.n_components):
            mask = ks == l
            if np.any(mask):
                out[mask] = comp.means[l] + z[mask] @ self._cond_sqrts[l].T
        return out


def posterior_components(mix: GaussianMixture, noise: NoiseModel, y: np.ndarray):
    return PosteriorOracle(mix, noise).components(y)


def posterior_moments(mix: GaussianMixture, noise: NoiseModel, y: np.ndarray):
    return PosteriorOracle(mix, noise).moments(y)


def posterior_sample(
    mix: GaussianMixture, noise: NoiseModel, y: np.ndarray, m: int, rng: np.random.Generator
):
    return PosteriorOracle(mix, noise).sample(y, m, rng)


def sample_dataset(
    mix: GaussianMixture, noise: NoiseModel, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n (x, y) pairs: component, then Gaussian, then additive noise."""
    if n < 1:
        raise ValueError("need n >= 1")
    ks = rng.choice(mix.n_components, size=n, p=mix.weights)
    z = rng.standard_normal((n, mix.dim))
    xs = np.empty((n, mix.dim))
    roots = [_psd_sqrt(c) for c in mix.covs]
    for l in range(mix.n_components):
        mask = ks == l
        if np.any(mask):
            xs[mask] = mix.means[l] + z[mask] @ roots[l].T
    ys = xs + noise.sigma_eps * rng.standard_normal((n, mix.dim))
    return xs, ys


def rank_k_truncation(cov: np.ndarray, K: int) -> np.ndarray:
    """Best rank-K PSD approximation via the top-K eigenpairs."""
    d = cov.shape[0]
    if K < 0 or K > d:
        raise ValueError(f"need 0 <= K <= {d}, got {K}")
    if K == 0:
        return np.zeros_like(cov)
    spec = eigh_sym(cov)
    lam = np.clip(spec.eigenvalues[:K], 0.0, None)
    V = spec.eigenvectors[:, :K]
    out = (V * lam) @ V.T
    return 0.5 * (out + out.T)


def make_toy_2d(seed: int = 0) -> tuple[GaussianMixture, NoiseModel]:
    """Canonical 2-D two-component mixture used throughout the toy runs.

    Fixed, well-separated anisotropic components; the seed only exists
    for interface symmetry with the 100-D builder.
    """
    del seed
    mix = GaussianMixture(
        weights=np.array([0.5, 0.5]),
        means=np.array([[3.0, 3.0], [-3.0, -3.0]]),
        covs=np.array(
            [
                [[2.0, 1.2], [1.2, 1.0]],
                [[1.0, -0.8], [-0.8, 2.0]],
            ]
        ),
    )
    return mix, NoiseModel(sigma_eps=2.0)


TOY_100D_DIM = 100
TOY_100D_RANK = 12
TOY_100D_MEAN_NORM = 25.0


def make_toy_100d(seed: int = 0) -> tuple[GaussianMixture, NoiseModel]:
    """100-D symmetric two-component mixture with a shared low-rank-plus-
    identity covariance Q Q^T + I, rank(Q) = 12, and noise std 10."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(TOY_100D_DIM)
    direction /= np.linalg.norm(direction)
    mu1 = TOY_100D_MEAN_NORM * direction
    Q = rng.standard_normal((TOY_100D_DIM, TOY_100D_RANK))
    cov = Q @ Q.T + np.eye(TOY_100D_DIM)
    cov = 0.5 * (cov + cov.T)
    mix = GaussianMixture(
        weights=np.array([0.5, 0.5]),
        means=np.stack([mu1, -mu1]),
        covs=np.stack([cov, cov]),
    )
    return mix, NoiseModel(sigma_eps=10.0)


def mixture_to_jsonable(mix: GaussianMixture, noise: NoiseModel) -> dict:
    return {
        "weights": mix.weights.tolist(),
        "means": mix.means.tolist(),
        "covs": mix.covs.tolist(),
        "sigma_eps": noise.sigma_eps,
    }


def mixture_from_jsonable(data: dict) -> tuple[GaussianMixture, NoiseModel]:
    mix = GaussianMixture(
        weights=np.array(data["weights"], dtype=np.float64),
        means=np.array(data["means"], dtype=np.float64),
        covs=np.array(data["covs"], dtype=np.float64),
    )
    return mix, NoiseModel(sigma_eps=float(data["sigma_eps"]))
