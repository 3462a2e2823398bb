"""Training procedures: mean-only, post-hoc, joint, and iterative per-PC.

All loops are deterministic under TrainConfig.seed: data order comes
from one explicitly seeded generator and gradient accumulation order is
fixed by the tape, so two runs with identical inputs produce bitwise
identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import AdamState, Tape, backward
from .errors import InvalidConfig, ZeroError
from .models import JointModel, MeanModel, NppcHead, NppcHeadConfig, OrthogonalizedHead


@dataclass(frozen=True)
class Triplet:
    """One training example for the direction head."""

    x: np.ndarray
    y: np.ndarray
    xhat: np.ndarray

    @property
    def e(self) -> np.ndarray:
        # always recomputed; never cached
        return self.x - self.xhat


def make_triplets(xs: np.ndarray, ys: np.ndarray, mean_model: MeanModel) -> list[Triplet]:
    """Attach frozen mean predictions to a paired dataset."""
    return [Triplet(x=x, y=y, xhat=mean_model.predict(y)) for x, y in zip(xs, ys)]


@dataclass(frozen=True)
class TrainConfig:
    K: int = 1
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    lambda1: float = 1.0
    lambda2: float = 1.0
    ramp_w_epoch: int = 20
    ramp_sigma_epoch: int = 40
    normalize_losses: bool = True
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not (0 <= self.ramp_w_epoch <= self.ramp_sigma_epoch <= self.epochs):
            raise InvalidConfig(
                f"need 0 <= ramp_w ({self.ramp_w_epoch}) <= ramp_sigma "
                f"({self.ramp_sigma_epoch}) <= epochs ({self.epochs})"
            )
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfig("loss weights must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def posthoc(cls, K: int, epochs: int = 40, **kw) -> "TrainConfig":
        # the mean is fixed, so the direction loss starts immediately and
        # the variance loss follows once directions have settled
        kw.setdefault("ramp_w_epoch", 0)
        kw.setdefault("ramp_sigma_epoch", min(20, epochs))
        return cls(K=K, epochs=epochs, **kw)


@dataclass
class TrainResult:
    model: object
    metrics: list[dict] = field(default_factory=list)


def _split(n: int, val_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return perm[n_val:], perm[:n_val]


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def _posthoc_sample_terms(tape, leaves, head, triplet, lam2, normalize):
    """(loss_w, loss_sigma | None, degenerate?) for one post-hoc sample."""
    out = head.forward(tape, leaves, triplet.y, triplet.xhat, on_degenerate="truncate")
    if out.k_effective == 0:
        return None, None, True
    e = tape.constant(triplet.e)
    lw = losses.loss_pc(out, e, normalize)
    ls = losses.loss_sigma(out, e, normalize) if lam2 != 0.0 else None
    return lw, ls, out.collapsed_at is not None


def train_posthoc(triplets: list[Triplet], head, config: TrainConfig) -> TrainResult:
    """Fit a direction head on frozen mean-model residuals.

    Minimizes lam1 * L_w + lam2 * L_sigma under the epoch schedule.
    Degenerate Gram-Schmidt steps truncate that sample's terms at the
    collapse index and are counted, not fatal.
    """
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = _split(len(triplets), config.val_fraction, rng)
    adam = AdamState.init(head.params, lr=config.lr)
    metrics: list[dict] = []
    for epoch in range(config.epochs):
        lam1, lam2 = losses.effective_weights(epoch, config)
        order = rng.permutation(train_idx)
        sum_w = sum_s = 0.0
        n_w = n_s = 0
        skipped_zero = skipped_degen = 0
        for batch in _batches(order, config.batch_size):
            tape = Tape()
            leaves = head.params.leaves(tape)
            w_terms, s_terms = [], []
            for i in batch:
                try:
                    lw, ls, degen = _posthoc_sample_terms(
                        tape, leaves, head, triplets[i], lam2, config.normalize_losses
                    )
                except ZeroError:
                    skipped_zero += 1
                    continue
                if degen:
                    skipped_degen += 1
                if lw is None:
                    continue
                w_terms.append(lw)
                if ls is not None:
                    s_terms.append(ls)
            if not w_terms:
                continue
            total = ad.scale(losses._sum(w_terms), lam1 / len(w_terms))
            if s_terms:
                total = ad.add(total, ad.scale(losses._sum(s_terms), lam2 / len(s_terms)))
            grads = backward(tape, total)
            ad.adam_step(adam, head.params, grads)
            sum_w += float(np.sum([t.value for t in w_terms]))
            n_w += len(w_terms)
            if s_terms:
                sum_s += float(np.sum([t.value for t in s_terms]))
                n_s += len(s_terms)
        record = {
            "epoch": epoch,
            "lambda1_eff": lam1,
            "lambda2_eff": lam2,
            "loss_w": sum_w / n_w if n_w else float("nan"),
            "loss_sigma": sum_s / n_s if n_s else float("nan"),
            "skipped_zero_error": skipped_zero,
            "skipped_degenerate": skipped_degen,
        }
        record["val_loss"] = _posthoc_val_loss(triplets, val_idx, head, lam1, lam2, config)
        metrics.append(record)
    return TrainResult(model=head, metrics=metrics)


def _posthoc_val_loss(triplets, val_idx, head, lam1, lam2, config) -> float:
    if len(val_idx) == 0:
        return float("nan")
    total = 0.0
    n = 0
    for i in val_idx:
        tape = Tape()
        leaves = head.params.leaves(tape)
        try:
            lw, ls, _ = _posthoc_sample_terms(
                tape, leaves, head, triplets[i], lam2, config.normalize_losses
            )
        except ZeroError:
            continue
        if lw is None:
            continue
        total += lam1 * float(lw.value) + (lam2 * float(ls.value) if ls is not None else 0.0)
        n += 1
    return total / n if n else float("nan")


def train_mean(
    xs: np.ndarray, ys: np.ndarray, model: MeanModel, config: TrainConfig
) -> TrainResult:
    """Plain MSE training of the conditional-mean MLP."""
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = _split(len(xs), config.val_fraction, rng)
    adam = AdamState.init(model.params, lr=config.lr)
    metrics: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        count = 0
        for batch in _batches(order, config.batch_size):
            tape = Tape()
            leaves = model.params.leaves(tape)
            terms = [
                losses.loss_mu(model.forward(tape, leaves, ys[i]), xs[i]) for i in batch
            ]
            loss = ad.scale(losses._sum(terms), 1.0 / len(terms))
            grads = backward(tape, loss)
            ad.adam_step(adam, model.params, grads)
            total += float(loss.value) * len(terms)
            count += len(terms)
        val_mse = float(
            np.mean([np.sum((xs[i] - model.predict(ys[i])) ** 2) for i in val_idx])
        ) if len(val_idx) else float("nan")
        metrics.append({"epoch": epoch, "loss_mu": total / count, "val_mse": val_mse})
    return TrainResult(model=model, metrics=metrics)


def train_joint(
    xs: np.ndarray, ys: np.ndarray, model: JointModel, config: TrainConfig
) -> TrainResult:
    """Optimize mean and directions together under the ramp schedule.

    The error fed to L_w and L_sigma, and the mean estimate fed to the
    head, both pass through stop_grad, so those losses contribute exactly
    zero gradient to the mean predictor.
    """
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = _split(len(xs), config.val_fraction, rng)
    opt_params = model.mean.params.prefixed("mean.").merged(model.head.params.prefixed("head."))
    adam = AdamState.init(opt_params, lr=config.lr)
    metrics: list[dict] = []
    for epoch in range(config.epochs):
        lam1, lam2 = losses.effective_weights(epoch, config)
        order = rng.permutation(train_idx)
        stats_sums: dict[str, float] = {}
        batches = 0
        skipped_degen = 0
        for batch in _batches(order, config.batch_size):
            tape = Tape()
            mean_leaves = model.mean.params.leaves(tape, "mean.")
            head_leaves = model.head.params.leaves(tape, "head.")
            items = []
            for i in batch:
                xhat = model.mean.forward(tape, mean_leaves, ys[i])
                xhat_in = ad.stop_grad(xhat)
                out = model.head.forward(
                    tape, head_leaves, ys[i], xhat_in, on_degenerate="truncate"
                )
                if out.collapsed_at is not None:
                    skipped_degen += 1
                items.append((xs[i], xhat, out))
            stats: dict = {}
            loss = losses.loss_all(items, epoch, config, stats)
            grads = backward(tape, loss)
            ad.adam_step(adam, opt_params, grads)
            for key in ("loss_mu", "loss_w", "loss_sigma"):
                if not np.isnan(stats[key]):
                    stats_sums[key] = stats_sums.get(key, 0.0) + stats[key]
            stats_sums["skipped_zero_error"] = (
                stats_sums.get("skipped_zero_error", 0.0) + stats["skipped_zero_error"]
            )
            batches += 1
        record = {
            "epoch": epoch,
            "lambda1_eff": lam1,
            "lambda2_eff": lam2,
            "skipped_degenerate": skipped_degen,
            "skipped_zero_error": int(stats_sums.get("skipped_zero_error", 0)),
        }
        for key in ("loss_mu", "loss_w", "loss_sigma"):
            record[key] = stats_sums.get(key, float("nan")) / batches if batches else float("nan")
        record["val_mse"] = float(
            np.mean([np.sum((xs[i] - model.mean.predict(ys[i])) ** 2) for i in val_idx])
        ) if len(val_idx) else float("nan")
        metrics.append(record)
    return TrainResult(model=model, metrics=metrics)


def train_iterative(
    triplets: list[Triplet],
    head_cfg: NppcHeadConfig,
    config: TrainConfig,
    upto_k: int,
) -> tuple[list[OrthogonalizedHead], list[list[dict]]]:
    """Train K single-direction models sequentially.

    Stage k's output is orthogonalized at forward time against the frozen
    directions of stages 1..k-1. Stage 1 is byte-for-byte the same
    computation as train_posthoc with K=1.
    """
    if upto_k > head_cfg.d_x:
        raise InvalidConfig(f"upto_k={upto_k} exceeds d_x={head_cfg.d_x}")
    stages: list[OrthogonalizedHead] = []
    all_metrics: list[list[dict]] = []
    for k in range(upto_k):
        base = NppcHead(replace(head_cfg, K=1), seed=config.seed + k)
        stage = OrthogonalizedHead(base, list(stages))
        result = train_posthoc(triplets, stage, config)
        stages.append(stage)
        all_metrics.append(result.metrics)
    return stages, all_metrics
