"""Training-procedure tests. These run small real trainings and are the
slowest part of the unit suite (roughly a couple of minutes total)."""

import numpy as np
import pytest

from nppc import autodiff as ad
from nppc import gmm, losses
from nppc.autodiff import Tape, backward
from nppc.errors import InvalidConfig
from nppc.models import (
    JointModel,
    MeanModel,
    MlpConfig,
    NppcHead,
    NppcHeadConfig,
    OrthogonalizedHead,
)
from nppc.training import (
    TrainConfig,
    Triplet,
    make_triplets,
    train_iterative,
    train_joint,
    train_mean,
    train_posthoc,
)


def linear_gaussian_world(seed=0, d=3):
    # anisotropic prior with well-separated posterior eigenvalues, so the
    # top eigenvectors are sharply determined
    rng = np.random.default_rng(seed)
    from nppc.linalg import random_orthogonal

    R = random_orthogonal(d, rng)
    cov = R @ np.diag([4.0, 1.0, 0.25][:d]) @ R.T
    mix = gmm.GaussianMixture(
        weights=np.array([1.0]), means=rng.standard_normal((1, d)), covs=cov[None]
    )
    return mix, gmm.NoiseModel(2.0)


class TestTrainConfig:
    def test_schedule_invariant(self):
        with pytest.raises(InvalidConfig):
            TrainConfig(ramp_w_epoch=30, ramp_sigma_epoch=20, epochs=40)
        with pytest.raises(InvalidConfig):
            TrainConfig(ramp_sigma_epoch=50, epochs=40)
        with pytest.raises(InvalidConfig):
            TrainConfig(lambda1=-1.0, epochs=50)

    def test_posthoc_defaults(self):
        cfg = TrainConfig.posthoc(K=2, epochs=10)
        assert cfg.ramp_w_epoch == 0
        assert cfg.ramp_sigma_epoch == 10


class TestTriplet:
    def test_error_recomputed(self):
        t = Triplet(x=np.array([1.0, 2.0]), y=np.zeros(2), xhat=np.array([0.5, 0.5]))
        np.testing.assert_array_equal(t.e, [0.5, 1.5])


@pytest.fixture(scope="module")
def gaussian_triplets():
    """Single-Gaussian world with the exact conditional mean as x_hat, so
    the head trains against clean posterior errors."""
    mix, noise = linear_gaussian_world(seed=1)
    oracle = gmm.PosteriorOracle(mix, noise)
    rng = np.random.default_rng(2)
    xs, ys = gmm.sample_dataset(mix, noise, 3000, rng)
    trips = [
        Triplet(x=x, y=y, xhat=oracle.moments(y).mean) for x, y in zip(xs, ys)
    ]
    return mix, noise, oracle, trips


class TestTrainPosthoc:
    def test_linear_gaussian_recovers_posterior_eigenvectors(self, gaussian_triplets):
        mix, noise, oracle, trips = gaussian_triplets
        # posterior covariance of a single Gaussian is y-independent
        cov = oracle.moments(trips[0].y).cov
        from nppc.linalg import eigh_sym

        spec = eigh_sym(cov)
        head = NppcHead(NppcHeadConfig(K=2, d_x=3, d_y=3, hidden=32, depth=3), seed=3)
        cfg = TrainConfig(
            K=2, epochs=30, batch_size=32, ramp_w_epoch=0, ramp_sigma_epoch=0,
            normalize_losses=False, seed=3,
        )
        result = train_posthoc(trips, head, cfg)
        cos = []
        for t in trips[:50]:
            W = head.predict(t.y, t.xhat).W
            for k in range(2):
                cos.append(abs(W[k] @ spec.eigenvectors[:, k]))
        assert np.median(cos) > 0.99
        # validation loss decreased from the first epoch
        assert result.metrics[-1]["val_loss"] < result.metrics[0]["val_loss"]
        assert np.isfinite(result.metrics[-1]["val_loss"])

    def test_full_basis_spans_error(self, gaussian_triplets):
        # K = d_x: any orthonormal output spans everything
        _, _, _, trips = gaussian_triplets
        head = NppcHead(NppcHeadConfig(K=3, d_x=3, d_y=3, hidden=8, depth=2), seed=4)
        t = trips[0]
        W = head.predict(t.y, t.xhat).W
        resid = t.e - W.T @ (W @ t.e)
        assert np.linalg.norm(resid) < 1e-10

    def test_skips_zero_error_samples(self):
        trips = [
            Triplet(x=np.ones(2), y=np.zeros(2), xhat=np.ones(2)),  # zero error
            Triplet(x=np.array([1.0, 0.0]), y=np.zeros(2), xhat=np.zeros(2)),
        ] * 10
        head = NppcHead(NppcHeadConfig(K=1, d_x=2, d_y=2, hidden=4, depth=2), seed=5)
        cfg = TrainConfig(
            K=1, epochs=1, batch_size=4, ramp_w_epoch=0, ramp_sigma_epoch=0,
            normalize_losses=True, seed=5, val_fraction=0.0,
        )
        result = train_posthoc(trips, head, cfg)
        assert result.metrics[0]["skipped_zero_error"] == 10


class TestTrainIterative:
    def test_stage1_bitwise_equals_posthoc_k1(self, gaussian_triplets):
        _, _, _, trips = gaussian_triplets
        subset = trips[:400]
        head_cfg = NppcHeadConfig(K=1, d_x=3, d_y=3, hidden=16, depth=3)
        cfg = TrainConfig(
            K=1, epochs=3, batch_size=32, ramp_w_epoch=0, ramp_sigma_epoch=0,
            normalize_losses=False, seed=7,
        )
        posthoc_head = NppcHead(head_cfg, seed=7)
        train_posthoc(subset, posthoc_head, cfg)
        stages, _ = train_iterative(subset, head_cfg, cfg, upto_k=1)
        for name in posthoc_head.params.names():
            np.testing.assert_array_equal(
                posthoc_head.params[name], stages[0].params[name]
            )

    def test_training_stage2_freezes_stage1(self, gaussian_triplets):
        _, _, _, trips = gaussian_triplets
        subset = trips[:300]
        head_cfg = NppcHeadConfig(K=1, d_x=3, d_y=3, hidden=8, depth=2)
        cfg = TrainConfig(
            K=1, epochs=2, batch_size=32, ramp_w_epoch=0, ramp_sigma_epoch=0,
            normalize_losses=False, seed=8,
        )
        stages, _ = train_iterative(subset, head_cfg, cfg, upto_k=2)
        snapshot = {n: stages[0].params[n].copy() for n in stages[0].params.names()}
        # retrain stage 2 afresh against the same frozen stage 1
        stage2 = OrthogonalizedHead(NppcHead(head_cfg, seed=99), [stages[0]])
        train_posthoc(subset, stage2, cfg)
        for name, before in snapshot.items():
            np.testing.assert_array_equal(stages[0].params[name], before)

    def test_stage2_orthogonal_to_stage1(self, gaussian_triplets):
        _, _, _, trips = gaussian_triplets
        subset = trips[:300]
        head_cfg = NppcHeadConfig(K=1, d_x=3, d_y=3, hidden=8, depth=2)
        cfg = TrainConfig(
            K=1, epochs=2, batch_size=32, ramp_w_epoch=0, ramp_sigma_epoch=0,
            normalize_losses=False, seed=9,
        )
        stages, _ = train_iterative(subset, head_cfg, cfg, upto_k=2)
        for t in subset[:20]:
            w1 = stages[0].predict(t.y, t.xhat).W[0]
            w2 = stages[1].predict(t.y, t.xhat).W[0]
            assert abs(w1 @ w2) < 1e-10

    def test_upto_k_validation(self, gaussian_triplets):
        _, _, _, trips = gaussian_triplets
        head_cfg = NppcHeadConfig(K=1, d_x=3, d_y=3, hidden=8, depth=2)
        cfg = TrainConfig(K=1, epochs=1, ramp_w_epoch=0, ramp_sigma_epoch=0, seed=0)
        with pytest.raises(InvalidConfig):
            train_iterative(trips, head_cfg, cfg, upto_k=5)


def correlated_gaussian_pairs(n, seed):
    mix = gmm.GaussianMixture(
        weights=np.array([1.0]),
        means=np.zeros((1, 2)),
        covs=np.array([[[3.0, 1.2], [1.2, 1.0]]]),
    )
    noise = gmm.NoiseModel(1.0)
    return gmm.sample_dataset(mix, noise, n, np.random.default_rng(seed)), (mix, noise)


class TestTrainJoint:
    def test_frozen_error_contract_exact_zero(self):
        # gradients of L_w and L_sigma w.r.t. mean parameters are exactly 0
        (xs, ys), _ = correlated_gaussian_pairs(4, seed=10)
        model = JointModel.create(
            MlpConfig(in_dim=2, out_dim=2, hidden=8, depth=2),
            NppcHeadConfig(K=2, d_x=2, d_y=2, hidden=8, depth=2),
            seed=11,
        )
        tape = Tape()
        mean_leaves = model.mean.params.leaves(tape, "mean.")
        head_leaves = model.head.params.leaves(tape, "head.")
        terms = []
        for x, y in zip(xs, ys):
            xhat = model.mean.forward(tape, mean_leaves, y)
            out = model.head.forward(tape, head_leaves, y, ad.stop_grad(xhat))
            e = ad.stop_grad(ad.sub(tape.constant(x), xhat))
            terms.append(ad.add(losses.loss_pc(out, e, False), losses.loss_sigma(out, e, False)))
        grads = backward(tape, losses._sum(terms))
        for name in model.mean.params.names():
            np.testing.assert_array_equal(grads["mean." + name], 0.0 * grads["mean." + name])

    def test_lambda_zero_degenerates_to_mean_training(self):
        (xs, ys), _ = correlated_gaussian_pairs(400, seed=12)
        model = JointModel.create(
            MlpConfig(in_dim=2, out_dim=2, hidden=16, depth=3),
            NppcHeadConfig(K=2, d_x=2, d_y=2, hidden=16, depth=3),
            seed=13,
        )
        head_before = {n: model.head.params[n].copy() for n in model.head.params.names()}
        cfg = TrainConfig(
            K=2, epochs=3, batch_size=32, lambda1=0.0, lambda2=0.0,
            ramp_w_epoch=0, ramp_sigma_epoch=0, seed=13,
        )
        result = train_joint(xs, ys, model, cfg)
        # the head never received gradient
        for name, before in head_before.items():
            np.testing.assert_array_equal(model.head.params[name], before)
        assert result.metrics[-1]["val_mse"] < result.metrics[0]["val_mse"]

    def test_joint_mean_matches_analytic_conditioning(self):
        (xs, ys), (mix, noise) = correlated_gaussian_pairs(2500, seed=14)
        oracle = gmm.PosteriorOracle(mix, noise)
        model = JointModel.create(
            MlpConfig(in_dim=2, out_dim=2, hidden=64, depth=3),
            NppcHeadConfig(K=2, d_x=2, d_y=2, hidden=64, depth=3),
            seed=15,
        )
        cfg = TrainConfig(
            K=2, epochs=12, batch_size=32, ramp_w_epoch=4, ramp_sigma_epoch=8,
            normalize_losses=False, seed=15,
        )
        train_joint(xs, ys, model, cfg)
        rng = np.random.default_rng(16)
        test_y = gmm.sample_dataset(mix, noise, 200, rng)[1]
        errs = [
            np.linalg.norm(model.mean.predict(y) - oracle.moments(y).mean)
            for y in test_y
        ]
        # analytic posterior std is ~0.9; the learned mean should sit well
        # inside one std of the exact conditional mean
        assert np.median(errs) < 0.35

    def test_joint_mse_close_to_mean_only_run(self):
        (xs, ys), _ = correlated_gaussian_pairs(2000, seed=17)
        mean_cfg = MlpConfig(in_dim=2, out_dim=2, hidden=32, depth=3)
        joint = JointModel.create(
            mean_cfg, NppcHeadConfig(K=2, d_x=2, d_y=2, hidden=32, depth=3), seed=18
        )
        cfg = TrainConfig(
            K=2, epochs=10, batch_size=32, ramp_w_epoch=3, ramp_sigma_epoch=6,
            normalize_losses=False, seed=18,
        )
        train_joint(xs, ys, joint, cfg)

        solo = MeanModel(mean_cfg, seed=18)
        solo_cfg = TrainConfig(
            K=1, epochs=10, batch_size=32, ramp_w_epoch=0, ramp_sigma_epoch=0, seed=18
        )
        train_mean(xs, ys, solo, solo_cfg)

        rng = np.random.default_rng(19)
        test_xs, test_ys = correlated_gaussian_pairs(500, seed=20)[0]
        mse_joint = np.mean(
            [np.sum((x - joint.mean.predict(y)) ** 2) for x, y in zip(test_xs, test_ys)]
        )
        mse_solo = np.mean(
            [np.sum((x - solo.predict(y)) ** 2) for x, y in zip(test_xs, test_ys)]
        )
        assert mse_joint <= 1.1 * mse_solo

    def test_schedule_and_unscheduled_agree_given_more_steps(self):
        # ramping lambda2 late and running flat-out converge to the same
        # directions on a correlated Gaussian
        (xs, ys), (mix, noise) = correlated_gaussian_pairs(1500, seed=21)
        oracle = gmm.PosteriorOracle(mix, noise)

        def run(schedule, epochs):
            model = JointModel.create(
                MlpConfig(in_dim=2, out_dim=2, hidden=32, depth=3),
                NppcHeadConfig(K=2, d_x=2, d_y=2, hidden=32, depth=3),
                seed=22,
            )
            t1, t2 = schedule
            cfg = TrainConfig(
                K=2, epochs=epochs, batch_size=32, ramp_w_epoch=t1, ramp_sigma_epoch=t2,
                normalize_losses=False, seed=22,
            )
            train_joint(xs, ys, model, cfg)
            return model

        scheduled = run((2, 4), epochs=6)
        flat = run((0, 0), epochs=24)  # 4x the steps, no ramp
        rng = np.random.default_rng(23)
        test_y = gmm.sample_dataset(mix, noise, 100, rng)[1]
        cos = []
        for y in test_y:
            w_a = scheduled.head.predict(y, scheduled.mean.predict(y)).W[0]
            w_b = flat.head.predict(y, flat.mean.predict(y)).W[0]
            cos.append(abs(w_a @ w_b))
        assert np.median(cos) > 0.95


class TestSymmetricMixtureMean:
    def test_symmetric_input_maps_near_zero(self):
        # mirror the draws so the empirical distribution is exactly
        # symmetric; the learned mean at y=0 should then be ~0
        cov = np.array([[1.5, 0.4], [0.4, 1.0]])
        mix = gmm.GaussianMixture(
            weights=np.array([0.5, 0.5]),
            means=np.array([[2.5, 2.5], [-2.5, -2.5]]),
            covs=np.stack([cov, cov]),
        )
        noise = gmm.NoiseModel(1.5)
        mix = gmm.GaussianMixture(
            weights=mix.weights, means=mix.means * 0.6, covs=mix.covs
        )
        xs, ys = gmm.sample_dataset(mix, noise, 3000, np.random.default_rng(24))
        xs = np.concatenate([xs, -xs])
        ys = np.concatenate([ys, -ys])
        model = MeanModel(MlpConfig(in_dim=2, out_dim=2, hidden=64, depth=3), seed=25)
        cfg = TrainConfig(K=1, epochs=18, batch_size=16, ramp_w_epoch=0, ramp_sigma_epoch=0, seed=25)
        train_mean(xs, ys, model, cfg)
        # settle with a short low-lr phase to damp optimizer wander
        tune = TrainConfig(K=1, epochs=6, batch_size=16, lr=1e-4, ramp_w_epoch=0, ramp_sigma_epoch=0, seed=26)
        train_mean(xs, ys, model, tune)
        assert np.max(np.abs(model.predict(np.zeros(2)))) < 0.05
