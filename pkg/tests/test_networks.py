import numpy as np
import pytest
import torch

from instancegm.networks import (ArchConfig, ConfigError, build_dual, build_peer, eval_mode,
                                 reparam_sample)

ARCH = ArchConfig()


@pytest.fixture(scope="module")
def net():
    return build_peer(ARCH, 0)


def test_decoder_shape_and_range(net):
    z = torch.randn(5, ARCH.d_z)
    y = torch.eye(4)[[0, 1, 2, 3, 0]]
    lam = net.decoder(z, y)
    assert lam.shape == (5, 16, 16, 3)
    assert bool(((lam > 0) & (lam < 1)).all())


@pytest.mark.parametrize("hw", [(16, 16), (12, 20), (8, 8)])
def test_odd_sizes_round_trip_shapes(hw):
    arch = ArchConfig(height=hw[0], width=hw[1])
    n = build_peer(arch, 0)
    x = torch.rand(2, *arch.image_shape)
    y = torch.eye(4)[:2]
    mu, var = n.encoder(x, y)
    assert mu.shape == var.shape == (2, arch.d_z)
    assert n.decoder(mu, y).shape == (2, *arch.image_shape)
    assert n.noisy_probs(x, y).shape == (2, 4)


def test_same_seed_same_parameters():
    a, b = build_peer(ARCH, 3), build_peer(ARCH, 3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_peer(ARCH, 4)
    assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    build_peer(ARCH, 9)
    assert torch.equal(torch.rand(1), before)


def test_dual_peers_differ():
    n1, n2 = build_dual(ARCH, 0)
    assert not torch.equal(next(n1.parameters()), next(n2.parameters()))


def test_classifier_outputs_simplex(net):
    x = torch.rand(7, 16, 16, 3)
    with eval_mode(net):
        p = net.clean_probs(x)
    assert torch.allclose(p.sum(1), torch.ones(7), atol=1e-6)
    assert bool((p >= 0).all())
    assert net.training


def test_forward_is_deterministic(net):
    x = torch.rand(4, 16, 16, 3)
    with eval_mode(net):
        assert torch.equal(net.clean_classifier(x), net.clean_classifier(x))
        y = torch.eye(4)
        assert torch.equal(net.encoder(x, y)[0], net.encoder(x, y)[0])


def test_parameter_groups_partition_the_model(net):
    disc = {id(p) for p in net.discriminative_parameters()}
    gen = {id(p) for p in net.generative_parameters()}
    assert not disc & gen
    assert disc | gen == {id(p) for p in net.parameters()}


def test_variance_is_positive(net):
    _, var = net.encoder(torch.rand(3, 16, 16, 3) * 100, torch.eye(4)[:3])
    assert bool((var > 0).all())


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(d_z=0), dict(height=2),
                                dict(backbone="resnet"), dict(width_scale=0.0)])
def test_bad_arch_rejected(kw):
    with pytest.raises(ConfigError):
        ArchConfig(**kw)


def test_reparam_degenerate_variance():
    mu = torch.tensor([[0.3, -1.2]])
    z = reparam_sample(mu, torch.full_like(mu, 1e-12), noise=0)
    assert torch.allclose(z, mu, atol=1e-5)


def test_reparam_moments():
    n = 100_000
    mu = torch.full((n, 1), 0.7, dtype=torch.float64)
    var = torch.full((n, 1), 4.0, dtype=torch.float64)
    z = reparam_sample(mu, var, noise=torch.Generator().manual_seed(1))
    assert abs(float(z.mean()) - 0.7) < 3 * 2.0 / np.sqrt(n)
    assert abs(float(z.var()) - 4.0) < 0.1


def test_reparam_seed_reproducible():
    mu, var = torch.zeros(3, 2), torch.ones(3, 2)
    assert torch.equal(reparam_sample(mu, var, 5), reparam_sample(mu, var, 5))


def test_reparam_mean_gradient_is_identity():
    mu = torch.tensor([0.2, -0.4, 1.0], dtype=torch.float64)
    var = torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64)
    eps = torch.randn(3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    h = 1e-6
    jac = np.zeros((3, 3))
    for j in range(3):
        d = torch.zeros(3, dtype=torch.float64)
        d[j] = h
        jac[:, j] = ((reparam_sample(mu + d, var, eps) - reparam_sample(mu - d, var, eps)) / (2 * h)).numpy()
    np.testing.assert_allclose(jac, np.eye(3), atol=1e-8)


def test_gradcheck_through_all_four_nets():
    arch = ArchConfig(height=8, width=8, num_classes=3, d_z=2, width_scale=0.125, clf_width=2)
    n = build_peer(arch, 0, dtype=torch.float64)
    n.eval()
    x = torch.rand(2, 8, 8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    eps = torch.randn(2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    params = list(n.parameters())

    # a scalar that touches every sub-network
    def loss():
        rho = n.clean_probs(x)
        mu, var = n.encoder(x, rho)
        lam = n.decoder(reparam_sample(mu, var, eps), rho)
        return lam.sum() + n.noisy_probs(x, rho)[:, 0].sum() + var.sum()

    out = loss()
    grads = torch.autograd.grad(out, params)
    rng = np.random.default_rng(0)
    h = 1e-4  # central differences; smaller steps hit float64 roundoff on tiny gradients
    worst = 0.0
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
        fd = (up - down) / (2 * h)
        an = grads[i].reshape(-1)[j].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    assert worst < 1e-4
