"""Variational free energy of the noisy-label generative model and the combined loss.

Per example:

    recon_nll + noisy_nll + KL[q(Y|x) || Uniform] + KL[q(Z|x,y) || N(0, I)]

where y is the clean-label estimate fed to the encoder, decoder and noisy
head.  No term carries a weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .distributions import (categorical_nll, cb_log_prob_batch, kl_cat_uniform,
                            kl_diag_gauss_stdnormal)
from .networks import reparam_sample


@dataclass
class ViTerms:
    recon_nll: torch.Tensor
    noisy_nll: torch.Tensor
    kl_y: torch.Tensor
    kl_z: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.recon_nll + self.noisy_nll + self.kl_y + self.kl_z

    def mean(self) -> "ViTerms":
        return ViTerms(self.recon_nll.mean(), self.noisy_nll.mean(),
                       self.kl_y.mean(), self.kl_z.mean())

    def as_floats(self) -> dict:
        m = self.mean()
        return {"recon_nll": float(m.recon_nll), "noisy_nll": float(m.noisy_nll),
                "kl_y": float(m.kl_y), "kl_z": float(m.kl_z), "total": float(m.total)}


def relaxed_label(rho: torch.Tensor, hard: bool = False) -> torch.Tensor:
    """Clean label fed downstream: rho itself, or its argmax one-hot with no gradient."""
    if not hard:
        return rho
    out = torch.zeros_like(rho)
    out.scatter_(-1, rho.detach().argmax(-1, keepdim=True), 1.0)
    return out


LABEL_MODES = ("enumerate", "soft", "hard")


def _conditional_terms(x, y_hat, y, net, noise, cb_recon: bool):
    """Reconstruction, noisy-label and latent-KL terms given a clean label ``y``."""
    mu, var = net.encoder(x, y)
    z = reparam_sample(mu, var, noise)
    lam = net.decoder(z, y)
    if cb_recon:
        recon = -cb_log_prob_batch(x, lam)
    else:
        recon = ((x - lam) ** 2).flatten(1).sum(1)
    noisy_nll = categorical_nll(net.noisy_probs(x, y), y_hat)
    return recon, noisy_nll, kl_diag_gauss_stdnormal(mu, var)


def variational_free_energy(x, y_hat, net, noise=None, label_mode: str = "soft",
                            cb_recon: bool = True) -> ViTerms:
    """Per-example free-energy terms for a batch.

    ``x`` is (B, H, W, C) in [0, 1] and ``y_hat`` the one-hot noisy labels.
    ``noise`` seeds the reparameterised latent draw (tensor, generator or int;
    a tensor must have shape (K, B, d_z) in enumerate mode, (B, d_z) otherwise).

    ``label_mode`` sets how the expectation over q(Y|x) is taken: "soft"
    feeds q(Y|x) itself as the label; "enumerate" sums the label-conditional
    terms over all K classes weighted by q(Y|x); "hard" feeds its argmax
    with no gradient.  With ``cb_recon=False`` the reconstruction term
    is the squared error between ``x`` and the decoder output.
    """
    if label_mode not in LABEL_MODES:
        raise ValueError(f"label_mode must be one of {LABEL_MODES}")
    rho = net.clean_probs(x)
    kl_y = kl_cat_uniform(rho, validate=False)
    if label_mode != "enumerate":
        y = relaxed_label(rho, hard=label_mode == "hard")
        recon, noisy_nll, kl_z = _conditional_terms(x, y_hat, y, net, noise, cb_recon)
        return ViTerms(recon, noisy_nll, kl_y, kl_z)

    b, k = rho.shape
    x_rep = x.repeat(k, 1, 1, 1)
    y_rep = torch.eye(k, dtype=x.dtype).repeat_interleave(b, dim=0)
    if isinstance(noise, torch.Tensor):
        noise = noise.reshape(k * b, -1)
    recon, noisy_nll, kl_z = _conditional_terms(x_rep, y_hat.repeat(k, 1), y_rep, net,
                                                noise, cb_recon)
    weights = rho.t()  # (K, B), row k holds q(Y=k | x)

    def expect(t):
        return (weights * t.view(k, b)).sum(0)

    return ViTerms(expect(recon), expect(noisy_nll), kl_y, expect(kl_z))


def total_loss(vi, dm) -> torch.Tensor:
    """Unweighted sum of the batch-mean free energy and the semi-supervised loss."""
    if isinstance(vi, ViTerms):
        vi = vi.mean().total
    else:
        vi = torch.as_tensor(vi).mean() if isinstance(vi, torch.Tensor) else vi
    return vi + dm
