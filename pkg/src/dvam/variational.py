"""KL machinery for the discrete model and the Gaussian baseline.

With a one-hot posterior the discrete KL collapses to the prior's
negative log likelihood of the selected code sequence (posterior entropy
is zero); it is a pure evaluation quantity, never part of the stage-1
objective.  The Gaussian baseline uses the closed-form diagonal-Gaussian
KL and the reparameterization trick, trained jointly with its
autoregressive prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericError


def discrete_kl(prior_probs, indices):
    """-sum_t log p(z_t = j_t) for a one-hot posterior selecting j_t.

    ``prior_probs`` is [T, C] with rows summing to 1 (checked to 1e-9);
    a zero prior probability at a selected index is an infinite
    divergence and raises NumericError.
    """
    probs = np.asarray(prior_probs, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    if probs.ndim != 2 or idx.ndim != 1 or probs.shape[0] != idx.shape[0]:
        raise ContractViolation("prior_probs must be [T, C] with one index per row")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ContractViolation("prior rows must sum to 1")
    picked = probs[np.arange(idx.shape[0]), idx]
    if (picked <= 0.0).any():
        raise NumericError("zero prior probability at a selected code: infinite KL")
    return float(-np.log(picked).sum())


def gaussian_kl_elements(mu, sigma, mu_hat, sigma_hat):
    """Elementwise KL(N(mu, sigma^2) || N(mu_hat, sigma_hat^2)), diagonal.

    Per element: log(sigma_hat/sigma) - 1/2 + (sigma^2 + (mu_hat-mu)^2)
    / (2 sigma_hat^2).  Differentiable in all four arguments.
    """
    mu, sigma = ad._as_tensor(mu), ad._as_tensor(sigma)
    mu_hat, sigma_hat = ad._as_tensor(mu_hat), ad._as_tensor(sigma_hat)
    if (sigma.data <= 0).any() or (sigma_hat.data <= 0).any():
        raise ContractViolation("standard deviations must be positive")
    diff = mu_hat - mu
    ratio = (sigma * sigma + diff * diff) * (sigma_hat ** -2.0)
    return ad.log(sigma_hat) - ad.log(sigma) - 0.5 + 0.5 * ratio


def gaussian_kl(mu, sigma, mu_hat, sigma_hat):
    """Total diagonal-Gaussian KL (scalar Tensor, summed over elements)."""
    return ad.tsum(gaussian_kl_elements(mu, sigma, mu_hat, sigma_hat))


def reparameterize(mu, sigma, rng):
    """z = mu + sigma * eps with eps ~ N(0, I) held constant, so gradients
    flow to mu and sigma only."""
    mu, sigma = ad._as_tensor(mu), ad._as_tensor(sigma)
    eps = rng.standard_normal(mu.data.shape)
    return mu + sigma * Tensor(eps)


def posterior_params(model, batch, sigma_floor=1e-6):
    """Per-position Gaussian posterior (mu, sigma), each [B, T, D]."""
    from .model import encode

    if not model.gaussian:
        raise ContractViolation("model was not built with a Gaussian head")
    hidden = encode(model, batch)
    mu = hidden @ model.params["post_mu.W"] + model.params["post_mu.b"]
    sigma = ad.softplus(hidden @ model.params["post_sigma.W"] + model.params["post_sigma.b"]) + sigma_floor
    return mu, sigma


@dataclass
class GvamLossResult:
    total: Tensor  # Rec + KL (batch sums)
    rec: Tensor
    kl: Tensor
    latents: np.ndarray  # [B, T, D] sampled z (detached)


def gvam_loss(model, gprior, batch, rng, sigma_floor=1e-6):
    """Single-sample variational objective for the Gaussian baseline.

    Posterior parameters come from the encoder, z is reparameterized,
    the learned autoregressive prior conditions on z_{<t}, and both the
    reconstruction and the closed-form KL are summed over non-PAD
    positions.  Gradients reach the prior both through its parameters
    and through z.
    """
    from . import corpus as cp
    from .model import decode_teacher_forced, reconstruction_loss
    from .prior import gaussian_prior_params

    mu, sigma = posterior_params(model, batch, sigma_floor)
    z = reparameterize(mu, sigma, rng)
    mu_hat, sigma_hat = gaussian_prior_params(gprior, z, sigma_floor)
    per_pos = ad.tsum(gaussian_kl_elements(mu, sigma, mu_hat, sigma_hat), axis=2)
    kl = ad.tsum(per_pos * Tensor(cp.target_mask(batch)))
    logits = decode_teacher_forced(model, z, batch)
    rec = reconstruction_loss(logits, batch)
    total = rec + kl
    return GvamLossResult(total=total, rec=rec, kl=kl, latents=z.data)
