"""Closed-form densities and divergences used by the variational objective.

All functions take torch tensors (or python floats, promoted to float64) and
are differentiable with autograd.  Array inputs are reduced by summation
where a scalar log-density or divergence is returned.
"""
from __future__ import annotations

import math

import torch

LAM_EPS = 1e-6
PROB_EPS = 1e-7
# |lam - 0.5| below this uses the series expansion of log C
TAYLOR_WINDOW = 1e-3

# log(2 atanh(t) / t) = log 2 + t^2/3 + 13 t^4/90 + 251 t^6/2835 + ...
_SERIES = (1.0 / 3.0, 13.0 / 90.0, 251.0 / 2835.0, 3551.0 / 56700.0)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_open_unit(lam: torch.Tensor, name: str = "lam") -> None:
    with torch.no_grad():
        if not bool(torch.all((lam > 0) & (lam < 1))):
            raise ValueError(f"{name} must lie strictly inside (0, 1)")


def clamp_lam(lam: torch.Tensor) -> torch.Tensor:
    return lam.clamp(LAM_EPS, 1.0 - LAM_EPS)


def cb_log_norm_const(lam) -> torch.Tensor:
    """Log normalizer of the continuous Bernoulli, elementwise.

    log C(lam) with C(lam) = 2 atanh(1 - 2 lam) / (1 - 2 lam) and C(0.5) = 2.
    Near lam = 0.5 a truncated series in t = 1 - 2 lam is used so that value
    and gradient stay finite across the removable singularity.
    """
    lam = _as_tensor(lam)
    _check_open_unit(lam)
    t = 1.0 - 2.0 * lam
    near = t.abs() < 2.0 * TAYLOR_WINDOW
    # keep the unused branch away from 0/0 so its gradient is not NaN
    t_far = torch.where(near, torch.full_like(t, 0.5), t)
    far = torch.log(2.0 * torch.atanh(t_far) / t_far)
    t_near = torch.where(near, t, torch.zeros_like(t))
    t2 = t_near * t_near
    series = torch.zeros_like(t_near)
    for c in reversed(_SERIES):
        series = (series + c) * t2
    return torch.where(near, math.log(2.0) + series, far)


def cb_log_prob(x, lam) -> torch.Tensor:
    """Continuous Bernoulli log density of ``x`` in [0, 1], summed over all entries."""
    x = _as_tensor(x)
    lam = _as_tensor(lam)
    with torch.no_grad():
        if not bool(torch.all((x >= 0) & (x <= 1))):
            raise ValueError("x must lie in [0, 1]")
    _check_open_unit(lam)
    elem = cb_log_norm_const(lam) + x * torch.log(lam) + (1.0 - x) * torch.log1p(-lam)
    return elem.sum()


def cb_log_prob_batch(x: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Per-example continuous Bernoulli log likelihood; sums all but the first axis.

    ``lam`` is clamped to [LAM_EPS, 1 - LAM_EPS] instead of validated, as this
    is the training path.
    """
    lam = clamp_lam(lam)
    elem = cb_log_norm_const(lam) + x * torch.log(lam) + (1.0 - x) * torch.log1p(-lam)
    return elem.flatten(1).sum(1)


def kl_diag_gauss_stdnormal(mu, var) -> torch.Tensor:
    """KL[N(mu, diag(var)) || N(0, I)] summed over the last axis.

    Leading axes are kept, so a (B, d) input gives a (B,) result.
    """
    mu = _as_tensor(mu)
    var = _as_tensor(var)
    with torch.no_grad():
        if not bool(torch.all(var > 0)):
            raise ValueError("variance must be positive")
    return 0.5 * (mu * mu + var - torch.log(var) - 1.0).sum(-1)


def _check_simplex(p: torch.Tensor, tol: float = 1e-6) -> None:
    with torch.no_grad():
        if bool(torch.any(p < 0)) or bool(torch.any((p.sum(-1) - 1).abs() > tol)):
            raise ValueError("probabilities must be nonnegative and sum to 1")


def kl_cat_uniform(rho, validate: bool = True) -> torch.Tensor:
    """KL[Cat(rho) || Uniform(K)] over the last axis, with 0 log 0 = 0."""
    rho = _as_tensor(rho)
    if validate:
        _check_simplex(rho)
    k = rho.shape[-1]
    safe = torch.where(rho > 0, rho, torch.ones_like(rho))
    terms = torch.where(rho > 0, rho * torch.log(k * safe), torch.zeros_like(rho))
    return terms.sum(-1)


def categorical_nll(rho, label) -> torch.Tensor:
    """-log rho[label] with rho clamped at PROB_EPS.

    ``label`` is a one-hot vector (or batch of them) of the same length as
    ``rho``; soft label vectors give the cross-entropy.
    """
    rho = _as_tensor(rho)
    label = _as_tensor(label).to(rho.dtype)
    if rho.shape[-1] != label.shape[-1]:
        raise ValueError(f"label length {label.shape[-1]} != number of classes {rho.shape[-1]}")
    return -(label * torch.log(rho.clamp_min(PROB_EPS))).sum(-1)
