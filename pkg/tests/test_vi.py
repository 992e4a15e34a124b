import numpy as np
import pytest
import torch
from scipy import stats

from instancegm.networks import ArchConfig, build_peer, eval_mode
from instancegm.vi import LABEL_MODES, ViTerms, relaxed_label, total_loss, variational_free_energy

D = torch.float64
ARCH = ArchConfig(height=8, width=8, num_classes=3, d_z=2, width_scale=0.125, clf_width=4)


@pytest.fixture()
def net():
    n = build_peer(ARCH, 0, D)
    n.eval()
    return n


@pytest.fixture()
def batch():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 8, 8, 3, dtype=D, generator=g)
    y_hat = torch.eye(3, dtype=D)[[0, 2, 1, 1]]
    return x, y_hat


def zero_layer(layer, bias=0.0):
    with torch.no_grad():
        layer.weight.zero_()
        layer.bias.fill_(bias)


def test_relaxed_label_examples():
    one = torch.tensor([[0.0, 1.0, 0.0]])
    assert torch.equal(relaxed_label(one), one)
    u = torch.full((1, 4), 0.25)
    assert torch.equal(relaxed_label(u), u)
    assert torch.equal(relaxed_label(torch.tensor([[0.6, 0.4]]), hard=True), torch.tensor([[1.0, 0.0]]))


def test_hard_label_blocks_gradient():
    rho = torch.tensor([[0.6, 0.4]], requires_grad=True)
    assert not relaxed_label(rho, hard=True).requires_grad


@pytest.mark.parametrize("mode", LABEL_MODES)
def test_degenerate_model_gives_log_k(net, batch, mode):
    # decoder outputs 0.5 everywhere, classifier and noisy head uniform, encoder N(0, 1)
    zero_layer(net.clean_classifier.body.fc)
    zero_layer(net.noisy_head.body.fc)
    zero_layer(net.encoder.mu)
    zero_layer(net.encoder.logvar)
    last = net.decoder.deconv[-1]
    zero_layer(last)
    x, y_hat = batch
    t = variational_free_energy(x, y_hat, net, noise=0, label_mode=mode)
    assert torch.allclose(t.recon_nll, torch.zeros(4, dtype=D), atol=1e-12)
    assert torch.allclose(t.kl_y, torch.zeros(4, dtype=D), atol=1e-12)
    assert torch.allclose(t.kl_z, torch.zeros(4, dtype=D), atol=1e-12)
    assert torch.allclose(t.total, torch.full((4,), np.log(3), dtype=D), atol=1e-12)


@pytest.mark.parametrize("mode", LABEL_MODES)
def test_kl_terms_nonnegative(net, batch, mode):
    t = variational_free_energy(*batch, net, noise=1, label_mode=mode)
    assert bool((t.kl_y >= 0).all()) and bool((t.kl_z >= 0).all())
    assert torch.allclose(t.total, t.recon_nll + t.noisy_nll + t.kl_y + t.kl_z)


def cb_logpdf(x, lam):
    """Independent continuous Bernoulli log density in numpy."""
    lam = np.asarray(lam, dtype=np.float64)
    c = np.where(np.abs(lam - 0.5) < 1e-8, 2.0,
                 2 * np.arctanh(1 - 2 * lam) / np.where(lam == 0.5, 1, 1 - 2 * lam))
    return np.log(c) + x * np.log(lam) + (1 - x) * np.log1p(-lam)


def oracle_terms(x, y_hat, y, net, eps):
    """Recompose the four terms from raw network outputs with scipy/numpy densities."""
    with torch.no_grad():
        rho = net.clean_probs(x).numpy()
        mu, var = (t.numpy() for t in net.encoder(x, y))
        z = mu + np.sqrt(var) * eps.numpy()
        lam = net.decoder(torch.as_tensor(z), y).numpy()
        noisy = net.noisy_probs(x, y).numpy()
    xn = x.numpy()
    recon = -cb_logpdf(xn, lam).reshape(len(xn), -1).sum(1)
    noisy_nll = -np.sum(y_hat.numpy() * np.log(np.maximum(noisy, 1e-7)), 1)
    k = rho.shape[1]
    kl_y = np.sum(rho * np.log(rho * k), 1)
    kl_z = 0.5 * np.sum(var + mu ** 2 - 1 - np.log(var), 1)
    return recon, noisy_nll, kl_y, kl_z


def test_soft_mode_matches_oracle(net, batch):
    x, y_hat = batch
    eps = torch.randn(4, 2, dtype=D, generator=torch.Generator().manual_seed(3))
    got = variational_free_energy(x, y_hat, net, noise=eps, label_mode="soft")
    with torch.no_grad():
        rho = net.clean_probs(x)
    want = oracle_terms(x, y_hat, rho, net, eps)
    for g, w in zip((got.recon_nll, got.noisy_nll, got.kl_y, got.kl_z), want):
        np.testing.assert_allclose(g.detach().numpy(), w, rtol=1e-9, atol=1e-9)


def test_enumerate_mode_is_expectation_over_classes(net, batch):
    x, y_hat = batch
    eps = torch.randn(3, 4, 2, dtype=D, generator=torch.Generator().manual_seed(4))
    got = variational_free_energy(x, y_hat, net, noise=eps, label_mode="enumerate")
    with torch.no_grad():
        rho = net.clean_probs(x).numpy()
    per_class = [oracle_terms(x, y_hat, torch.eye(3, dtype=D)[[k] * 4], net, eps[k]) for k in range(3)]
    for idx, name in ((0, "recon_nll"), (1, "noisy_nll"), (3, "kl_z")):
        want = sum(rho[:, k] * per_class[k][idx] for k in range(3))
        np.testing.assert_allclose(getattr(got, name).detach().numpy(), want, rtol=1e-9)
    np.testing.assert_allclose(got.kl_y.detach().numpy(), per_class[0][2], rtol=1e-9)


def test_hard_mode_uses_argmax(net, batch):
    x, y_hat = batch
    eps = torch.randn(4, 2, dtype=D, generator=torch.Generator().manual_seed(5))
    got = variational_free_energy(x, y_hat, net, noise=eps, label_mode="hard")
    with torch.no_grad():
        onehot = torch.eye(3, dtype=D)[net.clean_probs(x).argmax(1)]
    want = oracle_terms(x, y_hat, onehot, net, eps)
    np.testing.assert_allclose(got.recon_nll.detach().numpy(), want[0], rtol=1e-9)


def test_mse_reconstruction_mode(net, batch):
    x, y_hat = batch
    eps = torch.randn(4, 2, dtype=D, generator=torch.Generator().manual_seed(6))
    got = variational_free_energy(x, y_hat, net, noise=eps, label_mode="soft", cb_recon=False)
    with torch.no_grad():
        rho = net.clean_probs(x)
        mu, var = net.encoder(x, rho)
        lam = net.decoder(mu + var.sqrt() * eps, rho)
    want = ((x - lam) ** 2).reshape(4, -1).sum(1)
    assert torch.allclose(got.recon_nll, want, rtol=1e-12)


def test_order_invariance(net, batch):
    x, y_hat = batch
    perm = torch.tensor([2, 0, 3, 1])
    eps = torch.randn(3, 4, 2, dtype=D, generator=torch.Generator().manual_seed(7))
    a = variational_free_energy(x, y_hat, net, noise=eps, label_mode="enumerate")
    b = variational_free_energy(x[perm], y_hat[perm], net, noise=eps[:, perm], label_mode="enumerate")
    assert torch.allclose(a.total[perm], b.total, rtol=1e-12)


def test_unknown_mode_rejected(net, batch):
    with pytest.raises(ValueError):
        variational_free_energy(*batch, net, label_mode="gumbel")


def test_total_loss_examples():
    z = torch.zeros(3, dtype=D)
    terms = ViTerms(torch.tensor([1.0, 2.0, 3.0]), z.float(), z.float(), z.float())
    assert float(total_loss(terms, 0.0)) == pytest.approx(2.0)
    zeros = ViTerms(*(torch.zeros(2),) * 4)
    assert float(total_loss(zeros, 0.0)) == 0.0
    shifted = ViTerms(terms.recon_nll + 1.5, terms.noisy_nll, terms.kl_y, terms.kl_z)
    assert float(total_loss(shifted, 0.7)) == pytest.approx(float(total_loss(terms, 0.7)) + 1.5)


def test_no_weighting_in_total(net, batch):
    # the combined loss is the plain sum of the four batch means and the dm scalar
    with torch.no_grad():
        t = variational_free_energy(*batch, net, noise=0)
    parts = [float(v.mean()) for v in (t.recon_nll, t.noisy_nll, t.kl_y, t.kl_z)]
    assert float(total_loss(t, 0.25)) == pytest.approx(sum(parts) + 0.25, rel=1e-12)


@pytest.mark.parametrize("mode", ["soft", "enumerate"])
def test_free_energy_gradient_finite_differences(net, batch, mode):
    x, y_hat = batch
    shape = (3, 4, 2) if mode == "enumerate" else (4, 2)
    eps = torch.randn(*shape, dtype=D, generator=torch.Generator().manual_seed(8))
    params = list(net.parameters())

    def loss():
        return variational_free_energy(x, y_hat, net, noise=eps, label_mode=mode).mean().total

    grads = torch.autograd.grad(loss(), params)
    rng = np.random.default_rng(1)
    worst, h = 0.0, 1e-4
    for _ in range(60):
        i = rng.integers(len(params))
        j = rng.integers(params[i].numel())
        flat = params[i].data.view(-1)
        old = flat[j].item()
        flat[j] = old + h
        up = loss().item()
        flat[j] = old - h
        down = loss().item()
        flat[j] = old
        fd, an = (up - down) / (2 * h), grads[i].reshape(-1)[j].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    assert worst < 1e-4


def test_single_sample_kl_z_is_unbiased_for_elbo_term(net, batch):
    # the Monte-Carlo mean of the reparameterised draw matches the encoder mean
    x, _ = batch
    y = torch.eye(3, dtype=D)[[0, 1, 2, 0]]
    with torch.no_grad():
        mu, var = net.encoder(x, y)
        g = torch.Generator().manual_seed(0)
        zs = torch.stack([mu + var.sqrt() * torch.randn(mu.shape, generator=g, dtype=D)
                          for _ in range(4000)])
    se = (var.sqrt() / np.sqrt(4000)).numpy()
    assert np.all(np.abs(zs.mean(0).numpy() - mu.numpy()) < 4 * se)
    ks = stats.kstest(((zs[:, 0, 0] - mu[0, 0]) / var[0, 0].sqrt()).numpy(), "norm")
    assert ks.pvalue > 0.01
