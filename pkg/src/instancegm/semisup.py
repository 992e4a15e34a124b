"""DivideMix-style semi-supervised loss: co-refinement, co-guessing, sharpening, mixup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def _check_simplex(p: torch.Tensor, tol: float = 1e-5) -> None:
    if bool(torch.any(p < -tol)) or bool(torch.any((p.sum(-1) - 1).abs() > tol)):
        raise ValueError("expected probability vectors")


def sharpen(p, T: float) -> torch.Tensor:
    """Temperature sharpening p^(1/T) / sum(p^(1/T)) along the last axis."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    p = torch.as_tensor(p, dtype=torch.float64) if not isinstance(p, torch.Tensor) else p
    # in log space so that tiny probabilities and small T do not underflow
    logp = torch.log(p.clamp_min(0)) / T
    return torch.softmax(logp, dim=-1)


def co_refine(y, w, p_avg, T: float) -> torch.Tensor:
    """Refined label sharpen(w*y + (1-w)*p_avg) for labelled examples; w broadcasts per row."""
    y = torch.as_tensor(y, dtype=torch.float64) if not isinstance(y, torch.Tensor) else y
    p_avg = torch.as_tensor(p_avg, dtype=y.dtype) if not isinstance(p_avg, torch.Tensor) else p_avg
    w = torch.as_tensor(w, dtype=y.dtype)
    if bool(torch.any((w < 0) | (w > 1))):
        raise ValueError("w must be in [0, 1]")
    _check_simplex(y)
    _check_simplex(p_avg)
    if w.ndim == 1 and y.ndim == 2:
        w = w[:, None]
    return sharpen(w * y + (1 - w) * p_avg, T)


def augment(x: torch.Tensor, gen: torch.Generator, shift: int = 2) -> torch.Tensor:
    """Random horizontal flip and random shift-crop of up to ``shift`` pixels.

    ``x`` is channels-last (B, H, W, C); padding replicates the border.
    """
    b, h, w, _ = x.shape
    flip = torch.rand(b, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(2), x)
    if shift <= 0:
        return x
    padded = F.pad(x.permute(0, 3, 1, 2), (shift, shift, shift, shift), mode="replicate")
    dy = torch.randint(0, 2 * shift + 1, (b,), generator=gen)
    dx = torch.randint(0, 2 * shift + 1, (b,), generator=gen)
    rows = (dy[:, None] + torch.arange(h))[:, :, None].expand(b, h, w)
    cols = (dx[:, None] + torch.arange(w))[:, None, :].expand(b, h, w)
    bidx = torch.arange(b)[:, None, None].expand(b, h, w)
    out = padded.permute(0, 2, 3, 1)[bidx, rows, cols]
    return out


def identity_augment(x, gen=None):
    return x


@torch.no_grad()
def co_guess(x_u, net1, net2, n_aug: int, T: float, aug=augment, gen=None, views=None):
    """Sharpened average of both peers' predictions over ``n_aug`` augmented views.

    ``views`` may be passed to reuse augmentations already drawn by the caller.
    """
    if views is None:
        views = [aug(x_u, gen) for _ in range(n_aug)]
    preds = [net.clean_probs(v) for v in views for net in (net1, net2)]
    return sharpen(torch.stack(preds).mean(0), T)


@torch.no_grad()
def refine_targets(net, views, y, w, T: float):
    p_avg = torch.stack([net.clean_probs(v) for v in views]).mean(0)
    return co_refine(y, w.to(y.dtype), p_avg, T)


@dataclass
class MixBatch:
    mixed_inputs: torch.Tensor
    mixed_targets: torch.Tensor
    lam_prime: float
    n_labelled: int = 0


def draw_mix_coefficient(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = rng.beta(alpha, alpha)
    return float(max(lam, 1 - lam))


def mixup_pair(x_a, t_a, x_b, t_b, alpha: float, seed=None, lam: float | None = None) -> MixBatch:
    """Mix (x_a, t_a) with (x_b, t_b) using lam' = max(lam, 1 - lam), lam ~ Beta(alpha, alpha).

    ``lam`` bypasses the draw with a fixed mixing value.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if lam is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        lam = rng.beta(alpha, alpha)
    lp = float(max(lam, 1 - lam))
    return MixBatch(lp * x_a + (1 - lp) * x_b, lp * t_a + (1 - lp) * t_b, lp)


def mix_batch(inputs, targets, n_labelled: int, alpha: float, rng: np.random.Generator,
              gen: torch.Generator) -> MixBatch:
    """MixMatch mixing of a batch with a random permutation of itself."""
    lp = draw_mix_coefficient(alpha, rng)
    perm = torch.randperm(inputs.shape[0], generator=gen)
    mb = mixup_pair(inputs, targets, inputs[perm], targets[perm], alpha, lam=lp)
    mb.n_labelled = n_labelled
    return mb


def lambda_u_at(epoch: float, lambda_u: float, rampup: int) -> float:
    """Linear ramp of the unlabelled weight from 0 at epoch 0 to ``lambda_u`` at ``rampup``."""
    if rampup <= 0:
        return float(lambda_u)
    return float(lambda_u * np.clip(epoch / rampup, 0.0, 1.0))


def dividemix_terms(logits, mb: MixBatch, epoch: float, lambda_u: float, rampup: int,
                    lambda_r: float):
    """Return (total, Lx, Lu, Lreg) for logits of the mixed batch."""
    n = mb.n_labelled
    if n == 0:
        raise RuntimeError("empty labelled set: lower tau")
    t = mb.mixed_targets
    log_probs = F.log_softmax(logits, dim=1)
    lx = -(log_probs[:n] * t[:n]).sum(1).mean()
    if logits.shape[0] > n:
        probs_u = torch.softmax(logits[n:], dim=1)
        lu = ((probs_u - t[n:]) ** 2).mean()
    else:
        lu = logits.new_zeros(())
    k = logits.shape[1]
    prior = torch.full((k,), 1.0 / k, dtype=logits.dtype)
    p_bar = torch.softmax(logits, dim=1).mean(0)
    lreg = (prior * torch.log(prior / p_bar)).sum()
    total = lx + lambda_u_at(epoch, lambda_u, rampup) * lu + lambda_r * lreg
    return total, lx, lu, lreg


def dividemix_loss(net, mb: MixBatch, epoch: float, cfg) -> torch.Tensor:
    """L_x + lambda_u(epoch) L_u + lambda_r L_reg on a mixed batch for ``net``'s clean classifier."""
    logits = net.clean_classifier(mb.mixed_inputs)
    return dividemix_terms(logits, mb, epoch, cfg.lambda_u, cfg.rampup, cfg.lambda_r)[0]


def build_mix_batch(net, peer, x_l, y_l, w_l, x_u, cfg, rng: np.random.Generator,
                    gen: torch.Generator, aug=augment) -> MixBatch:
    """Augment, co-refine labelled targets with ``net``, co-guess unlabelled ones with both peers, mix."""
    views_l = [aug(x_l, gen) for _ in range(cfg.n_aug)]
    targets_l = refine_targets(net, views_l, y_l, w_l, cfg.t_sharpen)
    parts_x, parts_t = list(views_l), [targets_l] * cfg.n_aug
    if x_u is not None and len(x_u):
        views_u = [aug(x_u, gen) for _ in range(cfg.n_aug)]
        targets_u = co_guess(x_u, net, peer, cfg.n_aug, cfg.t_sharpen, views=views_u)
        parts_x += views_u
        parts_t += [targets_u] * cfg.n_aug
    inputs = torch.cat(parts_x)
    targets = torch.cat(parts_t).to(inputs.dtype)
    return mix_batch(inputs, targets, cfg.n_aug * len(x_l), cfg.alpha, rng, gen)
