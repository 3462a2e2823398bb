"""Loss functions for posterior-direction learning.

All losses are built on a tape and return scalar Vars. The error vector
e enters as a Var: a plain constant in post-hoc training, or
stop_grad(x - x_hat) when the mean is learned jointly, which keeps the
direction and variance objectives from steering the mean.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ZeroError

ZERO_ERROR_TOL = 1e-12


def _sum(terms: list[Var]) -> Var:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _error_norm_sq(e: Var) -> float:
    nsq = float(np.sum(e.value * e.value))
    if np.sqrt(nsq) < ZERO_ERROR_TOL:
        raise ZeroError(f"error norm {np.sqrt(nsq):.3e} below {ZERO_ERROR_TOL:g}")
    return nsq


def _capture(ws: list[Var], e: Var, normalize: bool) -> Var:
    """-sum_k |w_k^T e|^2, divided by ||e||^2 when normalized."""
    factor = -1.0 / _error_norm_sq(e) if normalize else -1.0
    terms = []
    for w in ws:
        p = ad.dot(w, e)
        terms.append(ad.mul(p, p))
    return ad.scale(_sum(terms), factor)


def loss_pc(output, e: Var, normalize: bool = True) -> Var:
    """Direction loss: reward energy of e captured by the w_k."""
    return _capture(output.w, e, normalize)


def loss_pc_first(w1: Var, e: Var, normalize: bool = True) -> Var:
    """Single-direction form of loss_pc (the per-PC iterative objective)."""
    return _capture([w1], e, normalize)


def loss_sigma(output, e: Var, normalize: bool = True) -> Var:
    """Variance loss: sum_k (sigma_k^2 - stopgrad(|w_k^T e|^2))^2.

    The projection target is frozen, so this term only sizes the raw
    direction norms; normalization divides by ||e||^4.
    """
    if normalize:
        nsq = _error_norm_sq(e)
        factor = 1.0 / (nsq * nsq)
    else:
        factor = 1.0
    terms = []
    for w, s2 in zip(output.w, output.sigma2):
        p = ad.dot(w, e)
        target = ad.stop_grad(ad.mul(p, p))
        diff = ad.sub(s2, target)
        terms.append(ad.mul(diff, diff))
    return ad.scale(_sum(terms), factor)


def loss_mu(xhat: Var, x: np.ndarray) -> Var:
    """Mean loss ||x - x_hat||^2."""
    x_const = xhat.tape.constant(np.asarray(x, dtype=np.float64))
    return ad.sqnorm(ad.sub(x_const, xhat))


def loss_per_pixel_var(xhat: Var, sigma2: Var, x: np.ndarray) -> Var:
    """||x_hat - x||^2 + ||sigma2 - stopgrad(x_hat - x)^2||^2.

    The per-coordinate variance target is frozen so it cannot move the
    mean prediction.
    """
    x_const = xhat.tape.constant(np.asarray(x, dtype=np.float64))
    err = ad.sub(xhat, x_const)
    frozen = ad.stop_grad(err)
    return ad.add(ad.sqnorm(err), ad.sqnorm(ad.sub(sigma2, ad.mul(frozen, frozen))))


def effective_weights(epoch: int, config) -> tuple[float, float]:
    """(lambda1, lambda2) after the ramp-up schedule at this epoch."""
    lam1 = config.lambda1 if epoch >= config.ramp_w_epoch else 0.0
    lam2 = config.lambda2 if epoch >= config.ramp_sigma_epoch else 0.0
    return lam1, lam2


def loss_all(items: list[tuple], epoch: int, config, stats: dict | None = None) -> Var:
    """Combined batch loss: mean L_mu + lam1 * mean L_w + lam2 * mean L_sigma.

    ``items`` holds (x, xhat_var, head_output) per sample. The schedule
    zeroes lam1 before ramp_w_epoch and lam2 before ramp_sigma_epoch.
    Samples with (numerically) zero error are skipped in the direction
    and variance terms; the count is reported through ``stats``.
    """
    lam1, lam2 = effective_weights(epoch, config)
    normalize = config.normalize_losses
    mu_terms: list[Var] = []
    w_terms: list[Var] = []
    s_terms: list[Var] = []
    skipped = 0
    for x, xhat, out in items:
        mu_terms.append(loss_mu(xhat, x))
        if lam1 == 0.0 and lam2 == 0.0:
            continue
        tape = xhat.tape
        e = ad.stop_grad(ad.sub(tape.constant(np.asarray(x, dtype=np.float64)), xhat))
        try:
            if lam1 != 0.0:
                w_terms.append(loss_pc(out, e, normalize))
            if lam2 != 0.0:
                s_terms.append(loss_sigma(out, e, normalize))
        except ZeroError:
            skipped += 1
    total = ad.scale(_sum(mu_terms), 1.0 / len(mu_terms))
    if w_terms:
        total = ad.add(total, ad.scale(_sum(w_terms), lam1 / len(w_terms)))
    if s_terms:
        total = ad.add(total, ad.scale(_sum(s_terms), lam2 / len(s_terms)))
    if stats is not None:
        stats["skipped_zero_error"] = skipped
        stats["loss_mu"] = float(np.mean([t.value for t in mu_terms]))
        stats["loss_w"] = float(np.mean([t.value for t in w_terms])) if w_terms else float("nan")
        stats["loss_sigma"] = (
            float(np.mean([t.value for t in s_terms])) if s_terms else float("nan")
        )
        stats["lambda1_eff"] = lam1
        stats["lambda2_eff"] = lam2
    return total
