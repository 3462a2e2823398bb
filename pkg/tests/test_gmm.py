import numpy as np
import pytest

from nppc import gmm
from nppc.linalg import eigh_sym


def random_mixture(rng, d=2, L=2):
    mats = rng.standard_normal((L, d, d))
    covs = np.stack([m @ m.T + 0.3 * np.eye(d) for m in mats])
    w = rng.random(L) + 0.2
    return gmm.GaussianMixture(weights=w / w.sum(), means=rng.standard_normal((L, d)), covs=covs)


def quad_moments_2d(mix, sigma_eps, y, n=400, pad=7.5):
    """Independent midpoint-rule integration of lik(y|x) * prior(x)."""
    centers, spreads = [], []
    for l in range(mix.n_components):
        A = mix.covs[l] + sigma_eps**2 * np.eye(2)
        centers.append(mix.means[l] + mix.covs[l] @ np.linalg.solve(A, y - mix.means[l]))
        S = mix.covs[l] - mix.covs[l] @ np.linalg.solve(A, mix.covs[l])
        spreads.append(np.sqrt(np.max(np.linalg.eigvalsh(S))))
    lo = np.min([c - pad * s for c, s in zip(centers, spreads)], axis=0)
    hi = np.max([c + pad * s for c, s in zip(centers, spreads)], axis=0)
    g0 = np.linspace(lo[0], hi[0], n)
    g1 = np.linspace(lo[1], hi[1], n)
    X0, X1 = np.meshgrid(g0, g1, indexing="ij")
    pts = np.stack([X0.ravel(), X1.ravel()], axis=1)
    dens = np.zeros(len(pts))
    for l in range(mix.n_components):
        diff = pts - mix.means[l]
        Si = np.linalg.inv(mix.covs[l])
        q = np.einsum("ni,ij,nj->n", diff, Si, diff)
        dens += mix.weights[l] * np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(np.linalg.det(mix.covs[l])))
    lik = np.exp(-0.5 * np.sum((y - pts) ** 2, axis=1) / sigma_eps**2)
    w = dens * lik
    w /= w.sum()
    mean = w @ pts
    dc = pts - mean
    return mean, (dc * w[:, None]).T @ dc


class TestSampleDataset:
    def test_noiseless_limit(self):
        mix, _ = gmm.make_toy_2d()
        xs, ys = gmm.sample_dataset(mix, gmm.NoiseModel(1e-12), 100, np.random.default_rng(0))
        assert np.max(np.abs(xs - ys)) < 1e-9

    def test_clt_mean_bound(self):
        mix = gmm.GaussianMixture(
            weights=np.array([1.0]), means=np.zeros((1, 3)), covs=np.eye(3)[None]
        )
        xs, _ = gmm.sample_dataset(mix, gmm.NoiseModel(0.5), 100000, np.random.default_rng(1))
        assert np.all(np.abs(xs.mean(axis=0)) < 0.02)  # ~ 3 sigma / sqrt(n) with margin

    def test_empirical_y_covariance(self):
        mix, noise = gmm.make_toy_2d()
        _, ys = gmm.sample_dataset(mix, noise, 200000, np.random.default_rng(2))
        _, prior_cov = mix.prior_moments()
        expected = prior_cov + noise.sigma_eps**2 * np.eye(2)
        emp = np.cov(ys.T, bias=True)
        assert np.max(np.abs(emp - expected)) / np.max(np.abs(expected)) < 0.05

    def test_deterministic_under_seed(self):
        mix, noise = gmm.make_toy_2d()
        a = gmm.sample_dataset(mix, noise, 50, np.random.default_rng(3))
        b = gmm.sample_dataset(mix, noise, 50, np.random.default_rng(3))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_n_validation(self):
        mix, noise = gmm.make_toy_2d()
        with pytest.raises(ValueError):
            gmm.sample_dataset(mix, noise, 0, np.random.default_rng(0))


class TestPosteriorComponents:
    def test_single_component_reduction(self):
        rng = np.random.default_rng(4)
        mix = random_mixture(rng, d=3, L=1)
        noise = gmm.NoiseModel(0.7)
        y = rng.standard_normal(3)
        comp = gmm.posterior_components(mix, noise, y)
        assert comp.responsibilities[0] == pytest.approx(1.0)
        A = mix.covs[0] + noise.sigma_eps**2 * np.eye(3)
        mu_ref = mix.means[0] + mix.covs[0] @ np.linalg.solve(A, y - mix.means[0])
        cov_ref = mix.covs[0] - mix.covs[0] @ np.linalg.solve(A, mix.covs[0])
        np.testing.assert_allclose(comp.means[0], mu_ref, atol=1e-10)
        np.testing.assert_allclose(comp.covs[0], cov_ref, atol=1e-10)

    def test_symmetric_mixture_even_split(self):
        cov = np.array([[1.0, 0.2], [0.2, 0.8]])
        mix = gmm.GaussianMixture(
            weights=np.array([0.5, 0.5]),
            means=np.array([[2.0, 1.0], [-2.0, -1.0]]),
            covs=np.stack([cov, cov]),
        )
        comp = gmm.posterior_components(mix, gmm.NoiseModel(1.0), np.zeros(2))
        np.testing.assert_allclose(comp.responsibilities, [0.5, 0.5], atol=1e-12)

    def test_far_point_responsibility(self):
        mix, noise = gmm.make_toy_2d()
        y = np.array([6.0, 6.0])  # deep inside component 1 territory
        comp = gmm.posterior_components(mix, noise, y)
        assert comp.responsibilities[0] > 0.999
        # density-ratio oracle with plain numpy
        logq = []
        for l in range(2):
            A = mix.covs[l] + noise.sigma_eps**2 * np.eye(2)
            diff = y - mix.means[l]
            logq.append(
                -0.5 * (diff @ np.linalg.solve(A, diff) + np.log(np.linalg.det(A)))
            )
        ratio = np.exp(logq[0] - logq[1])
        expected = ratio / (ratio + 1.0)
        assert comp.responsibilities[0] == pytest.approx(expected, rel=1e-10)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        mix = random_mixture(rng, d=2, L=3)
        noise = gmm.NoiseModel(0.9)
        y = rng.standard_normal(2)
        perm = np.array([2, 0, 1])
        mix_p = gmm.GaussianMixture(
            weights=mix.weights[perm], means=mix.means[perm], covs=mix.covs[perm]
        )
        a = gmm.posterior_components(mix, noise, y).responsibilities
        b = gmm.posterior_components(mix_p, noise, y).responsibilities
        np.testing.assert_allclose(b, a[perm], atol=1e-12)


class TestPosteriorMoments:
    def test_single_component_equals_conditioning(self):
        rng = np.random.default_rng(6)
        mix = random_mixture(rng, d=2, L=1)
        noise = gmm.NoiseModel(0.5)
        y = rng.standard_normal(2)
        mom = gmm.posterior_moments(mix, noise, y)
        comp = gmm.posterior_components(mix, noise, y)
        np.testing.assert_allclose(mom.mean, comp.means[0], atol=1e-12)
        np.testing.assert_allclose(mom.cov, comp.covs[0], atol=1e-12)

    def test_uninformative_limit(self):
        mix, _ = gmm.make_toy_2d()
        mom = gmm.posterior_moments(mix, gmm.NoiseModel(1e6), np.array([0.4, -0.2]))
        prior_mu, prior_cov = mix.prior_moments()
        assert np.max(np.abs(mom.mean - prior_mu)) < 1e-3 * max(1.0, np.max(np.abs(prior_mu)))
        assert np.max(np.abs(mom.cov - prior_cov)) / np.max(np.abs(prior_cov)) < 1e-3

    def test_quadrature_oracle(self):
        mix, noise = gmm.make_toy_2d()
        rng = np.random.default_rng(7)
        for _ in range(5):
            xs, ys = gmm.sample_dataset(mix, noise, 1, rng)
            mom = gmm.posterior_moments(mix, noise, ys[0])
            qm, qc = quad_moments_2d(mix, noise.sigma_eps, ys[0])
            assert np.linalg.norm(mom.mean - qm) / max(1.0, np.linalg.norm(qm)) < 1e-3
            assert np.linalg.norm(mom.cov - qc) / np.linalg.norm(qc) < 1e-3

    def test_psd_over_random_draws(self):
        rng = np.random.default_rng(8)
        bad = 0
        for _ in range(10000):
            mix = random_mixture(rng, d=int(rng.integers(1, 5)), L=int(rng.integers(1, 4)))
            noise = gmm.NoiseModel(float(rng.random()) + 0.1)
            y = rng.standard_normal(mix.dim)
            mom = gmm.posterior_moments(mix, noise, y)
            lam = eigh_sym(mom.cov).eigenvalues
            if lam.min() < -1e-10 * max(1.0, lam.max()):
                bad += 1
        assert bad == 0

    def test_law_of_total_variance(self):
        mix, noise = gmm.make_toy_2d()
        oracle = gmm.PosteriorOracle(mix, noise)
        rng = np.random.default_rng(9)
        xs, ys = gmm.sample_dataset(mix, noise, 100000, rng)
        cov_sum = np.zeros((2, 2))
        means = np.empty_like(ys)
        for i, y in enumerate(ys):
            mom = oracle.moments(y)
            cov_sum += mom.cov
            means[i] = mom.mean
        total = cov_sum / len(ys) + np.cov(means.T, bias=True)
        _, prior_cov = mix.prior_moments()
        assert np.max(np.abs(total - prior_cov)) / np.max(np.abs(prior_cov)) < 0.02


class TestPosteriorSample:
    def test_mean_clt_bound(self):
        mix, noise = gmm.make_toy_2d()
        oracle = gmm.PosteriorOracle(mix, noise)
        y = np.array([0.5, 1.0])
        mom = oracle.moments(y)
        samples = oracle.sample(y, 100000, np.random.default_rng(10))
        lam_max = eigh_sym(mom.cov).eigenvalues[0]
        bound = 3.0 * np.sqrt(lam_max / len(samples))
        assert np.all(np.abs(samples.mean(axis=0) - mom.mean) < bound)

    def test_covariance_spectral_bound(self):
        mix, noise = gmm.make_toy_2d()
        oracle = gmm.PosteriorOracle(mix, noise)
        y = np.array([-1.0, 2.0])
        mom = oracle.moments(y)
        samples = oracle.sample(y, 100000, np.random.default_rng(11))
        emp = np.cov(samples.T, bias=True)
        err = eigh_sym(0.5 * ((emp - mom.cov) + (emp - mom.cov).T)).eigenvalues
        assert np.max(np.abs(err)) / eigh_sym(mom.cov).eigenvalues[0] < 0.05

    def test_degenerate_limit_collapses_to_mean(self):
        mix = gmm.GaussianMixture(
            weights=np.array([1.0]), means=np.zeros((1, 2)), covs=(1e-12 * np.eye(2))[None]
        )
        noise = gmm.NoiseModel(1e-6)
        oracle = gmm.PosteriorOracle(mix, noise)
        samples = oracle.sample(np.array([0.3, 0.3]), 100, np.random.default_rng(12))
        comp = oracle.components(np.array([0.3, 0.3]))
        assert np.max(np.abs(samples - comp.means[0])) < 1e-5


class TestRankKTruncation:
    def test_full_rank_is_identity(self):
        rng = np.random.default_rng(13)
        M = rng.standard_normal((4, 4))
        S = M @ M.T
        np.testing.assert_allclose(gmm.rank_k_truncation(S, 4), S, atol=1e-10)

    def test_k0_is_zero(self):
        np.testing.assert_array_equal(gmm.rank_k_truncation(np.eye(3), 0), np.zeros((3, 3)))

    def test_diagonal(self):
        S = np.diag([5.0, 3.0, 1.0])
        np.testing.assert_allclose(
            gmm.rank_k_truncation(S, 2), np.diag([5.0, 3.0, 0.0]), atol=1e-12
        )


class TestToyBuilders:
    def test_toy2d_contract(self):
        mix, noise = gmm.make_toy_2d()
        assert mix.weights.sum() == pytest.approx(1.0)
        for c in mix.covs:
            assert np.min(np.linalg.eigvalsh(c)) > 0
        assert noise.sigma_eps == 2.0
        a = gmm.make_toy_2d(0)[0]
        b = gmm.make_toy_2d(0)[0]
        np.testing.assert_array_equal(a.means, b.means)

    def test_toy100d_low_rank_structure(self):
        mix, noise = gmm.make_toy_100d(0)
        assert noise.sigma_eps == 10.0
        lam = eigh_sym(mix.covs[0] - np.eye(100)).eigenvalues
        assert lam[11] > 1.0  # twelve live directions
        assert abs(lam[12]) < 1e-8  # thirteenth eigenvalue is numerically zero
        assert np.min(eigh_sym(mix.covs[0]).eigenvalues) >= 1.0 - 1e-10

    def test_toy100d_symmetry_and_determinism(self):
        mix, _ = gmm.make_toy_100d(0)
        np.testing.assert_allclose(mix.weights @ mix.means, np.zeros(100), atol=1e-12)
        assert np.linalg.norm(mix.means[0]) == pytest.approx(25.0)
        mix2, _ = gmm.make_toy_100d(0)
        np.testing.assert_array_equal(mix.covs, mix2.covs)

    def test_serialization_roundtrip(self):
        mix, noise = gmm.make_toy_2d()
        data = gmm.mixture_to_jsonable(mix, noise)
        mix2, noise2 = gmm.mixture_from_jsonable(data)
        np.testing.assert_array_equal(mix.covs, mix2.covs)
        assert noise2.sigma_eps == noise.sigma_eps
