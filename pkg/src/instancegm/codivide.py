"""Small-loss partitioning of a noisy training set.

Per-sample cross-entropy losses are min-max normalised, a two-component 1-D
Gaussian mixture is fitted by EM, and the posterior of the low-loss
component is used as the probability that a label is clean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import logsumexp

VAR_FLOOR = 1e-6


class DegenerateFitError(ValueError):
    """The loss values carry no spread to split."""


@dataclass
class Gmm2:
    means: np.ndarray
    vars: np.ndarray
    weights: np.ndarray
    log_likelihoods: list = field(default_factory=list)
    n_iter: int = 0

    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        return (np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.vars)
                - 0.5 * (x - self.means) ** 2 / self.vars)

    def log_likelihood(self, x) -> float:
        return float(logsumexp(self.component_log_density(x), axis=1).sum())


@dataclass
class CoDividePartition:
    w: np.ndarray
    labelled_idx: np.ndarray
    unlabelled_idx: np.ndarray

    def __len__(self):
        return len(self.w)


@torch.no_grad()
def raw_sample_ce(net, images: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """-log q(y_noisy | x) per example, without normalisation."""
    from .networks import eval_mode
    clf = net.clean_classifier
    dtype = next(clf.parameters()).dtype
    out = []
    with eval_mode(clf):
        for start in range(0, len(images), batch_size):
            x = torch.as_tensor(images[start:start + batch_size], dtype=dtype)
            y = torch.as_tensor(labels[start:start + batch_size], dtype=torch.long)
            out.append(torch.nn.functional.cross_entropy(clf(x), y, reduction="none"))
    return torch.cat(out).double().numpy()


def normalise_losses(losses: np.ndarray) -> np.ndarray:
    lo, hi = losses.min(), losses.max()
    if hi - lo <= 0:
        return np.zeros_like(losses)
    return (losses - lo) / (hi - lo)


def per_sample_ce(net, ds) -> np.ndarray:
    """Min-max normalised per-example cross-entropy of the clean classifier vs noisy labels."""
    if tuple(ds.image_shape) != tuple(net.cfg.image_shape) or ds.num_classes != net.cfg.num_classes:
        raise ValueError(f"network built for {net.cfg.image_shape}/{net.cfg.num_classes} classes, "
                         f"dataset is {ds.image_shape}/{ds.num_classes}")
    return normalise_losses(raw_sample_ce(net, ds.images, ds.noisy_labels))


def fit_gmm2(losses, max_iter: int = 100, tol: float = 1e-6, seed: int = 0) -> Gmm2:
    """EM for a two-component 1-D Gaussian mixture.

    Means start at the 10th/90th percentiles, variances at the pooled
    variance, weights at 1/2.  ``seed`` is accepted for interface stability;
    the initialisation is deterministic.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if x.size < 4:
        raise ValueError("need at least 4 samples")
    if np.ptp(x) == 0:
        raise DegenerateFitError("all loss values are identical")
    means = np.percentile(x, [10, 90]).astype(np.float64)
    var = max(x.var(), VAR_FLOOR)
    g = Gmm2(means=means, vars=np.array([var, var]), weights=np.array([0.5, 0.5]))
    prev = g.log_likelihood(x)
    g.log_likelihoods.append(prev)
    for it in range(1, max_iter + 1):
        logp = g.component_log_density(x)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        nk = resp.sum(0) + 1e-12
        means = (resp * x[:, None]).sum(0) / nk
        vars_ = np.maximum((resp * (x[:, None] - means) ** 2).sum(0) / nk, VAR_FLOOR)
        weights = nk / nk.sum()
        g = Gmm2(means=means, vars=vars_, weights=weights,
                 log_likelihoods=g.log_likelihoods, n_iter=it)
        ll = g.log_likelihood(x)
        g.log_likelihoods.append(ll)
        if ll - prev < tol:
            break
        prev = ll
    order = np.argsort(g.means, kind="stable")
    g.means, g.vars, g.weights = g.means[order], g.vars[order], g.weights[order]
    return g


def clean_posterior(g: Gmm2, losses) -> np.ndarray:
    """Posterior probability of the lower-mean component for each loss."""
    logp = g.component_log_density(losses)
    lo = int(np.argmin(g.means))
    return np.exp(logp[:, lo] - logsumexp(logp, axis=1))


def partition(w, tau: float) -> CoDividePartition:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    w = np.asarray(w, dtype=np.float64)
    mask = w >= tau
    return CoDividePartition(w=w, labelled_idx=np.flatnonzero(mask),
                             unlabelled_idx=np.flatnonzero(~mask))


def co_divide(net, ds, tau: float, max_iter: int = 100, tol: float = 1e-6, seed: int = 0):
    """Fit the mixture on ``net``'s losses and split ``ds``; returns (partition, gmm)."""
    losses = per_sample_ce(net, ds)
    g = fit_gmm2(losses, max_iter=max_iter, tol=tol, seed=seed)
    return partition(clean_posterior(g, losses), tau), g


def roc_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties get mid-ranks)."""
    from scipy.stats import rankdata
    positives = np.asarray(positives, dtype=bool)
    n_pos, n_neg = positives.sum(), (~positives).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
