"""Per-peer networks: clean-label classifier, encoder, decoder and noisy-label head.

Images enter every network channels-last, (B, H, W, C) with values in [0, 1].
Label conditioning is by concatenation: the one-hot (or soft) label is
broadcast to constant extra image channels for the encoder and the noisy
head, and appended to the latent vector for the decoder.
"""
from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .distributions import clamp_lam

ENC_WIDTHS = (32, 64, 128, 256)
DEC_WIDTHS = (256, 128, 64, 32)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    num_classes: int = 4
    d_z: int = 8
    # "small": 2-conv classifiers and encoder/decoder widths scaled by width_scale
    # "paper": full 32-256 encoder/decoder widths, wider classifiers
    backbone: str = "small"
    width_scale: float = 0.25
    clf_width: int = 16

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ConfigError("image dimensions must be positive")
        if self.height < 4 or self.width < 4:
            raise ConfigError("images must be at least 4x4")
        if self.num_classes < 2 or self.d_z < 1:
            raise ConfigError("need num_classes >= 2 and d_z >= 1")
        if self.backbone not in ("small", "paper"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.width_scale <= 0 or self.clf_width < 1:
            raise ConfigError("widths must be positive")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def scaled(self, widths):
        scale = 1.0 if self.backbone == "paper" else self.width_scale
        return [max(1, int(round(w * scale))) for w in widths]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _label_planes(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    b, _, h, w = x.shape
    return torch.cat([x, y[:, :, None, None].expand(b, y.shape[1], h, w)], dim=1)


class ConvClassifier(nn.Module):
    """Two 3x3 conv + batch-norm + pool stages followed by a linear layer; returns logits."""

    def __init__(self, in_channels: int, num_classes: int, height: int, width: int, base: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, base, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(base)
        self.conv2 = nn.Conv2d(base, 2 * base, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(2 * base)
        self.fc = nn.Linear(2 * base * (height // 4) * (width // 4), num_classes)

    def forward(self, x):
        h = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)
        h = F.max_pool2d(F.relu(self.bn2(self.conv2(h))), 2)
        return self.fc(h.flatten(1))


class CleanClassifier(nn.Module):
    """q(Y|X): logits over the clean classes."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        base = cfg.clf_width if cfg.backbone == "small" else 4 * cfg.clf_width
        self.body = ConvClassifier(cfg.channels, cfg.num_classes, cfg.height, cfg.width, base)

    def forward(self, x):
        return self.body(_nchw(x))


class NoisyHead(nn.Module):
    """p(Y_noisy | X, Y): logits over noisy labels given the image and a clean label."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        base = cfg.clf_width if cfg.backbone == "small" else 4 * cfg.clf_width
        self.body = ConvClassifier(cfg.channels + cfg.num_classes, cfg.num_classes,
                                   cfg.height, cfg.width, base)

    def forward(self, x, y):
        return self.body(_label_planes(_nchw(x), y))


class Encoder(nn.Module):
    """q(Z|X,Y): four stride-2 convolutions, then mean and variance heads."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        widths = cfg.scaled(ENC_WIDTHS)
        layers, c = [], cfg.channels + cfg.num_classes
        h, w = cfg.height, cfg.width
        for out in widths:
            layers += [nn.Conv2d(c, out, 3, stride=2, padding=1), nn.ReLU()]
            c, h, w = out, (h + 1) // 2, (w + 1) // 2
        self.conv = nn.Sequential(*layers)
        self.mu = nn.Linear(c * h * w, cfg.d_z)
        self.logvar = nn.Linear(c * h * w, cfg.d_z)

    def forward(self, x, y):
        h = self.conv(_label_planes(_nchw(x), y)).flatten(1)
        logvar = self.logvar(h).clamp(-12.0, 8.0)
        return self.mu(h), torch.exp(logvar)


class Decoder(nn.Module):
    """p(X|Z,Y): linear projection then four stride-2 transposed convolutions.

    Output is the per-pixel continuous Bernoulli parameter, channels-last,
    squashed by a sigmoid and clamped into [1e-6, 1 - 1e-6].
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        widths = cfg.scaled(DEC_WIDTHS)
        self.h0 = -(-cfg.height // 16)
        self.w0 = -(-cfg.width // 16)
        self.out_hw = (cfg.height, cfg.width)
        self.w_first = widths[0]
        self.fc = nn.Linear(cfg.d_z + cfg.num_classes, widths[0] * self.h0 * self.w0)
        layers = []
        outs = list(widths[1:]) + [cfg.channels]
        for i, (cin, cout) in enumerate(zip(widths, outs)):
            layers.append(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1))
            if i < len(outs) - 1:
                layers.append(nn.ReLU())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z, y):
        h = F.relu(self.fc(torch.cat([z, y], dim=1)))
        h = self.deconv(h.view(-1, self.w_first, self.h0, self.w0))
        h = h[:, :, : self.out_hw[0], : self.out_hw[1]]
        return clamp_lam(torch.sigmoid(h)).permute(0, 2, 3, 1)


class PeerNet(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.clean_classifier = CleanClassifier(cfg)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.noisy_head = NoisyHead(cfg)

    def clean_probs(self, x):
        return torch.softmax(self.clean_classifier(x), dim=1)

    def noisy_probs(self, x, y):
        return torch.softmax(self.noisy_head(x, y), dim=1)

    def discriminative_parameters(self):
        return list(self.clean_classifier.parameters()) + list(self.noisy_head.parameters())

    def generative_parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())


@contextlib.contextmanager
def eval_mode(*modules):
    """Put modules in eval mode (batch-norm running statistics) and restore afterwards."""
    was = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, flag in zip(modules, was):
            m.train(flag)


def build_peer(arch: ArchConfig, seed: int, dtype=torch.float32) -> PeerNet:
    """Build a PeerNet whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = PeerNet(arch)
    return net.to(dtype)


def build_dual(arch: ArchConfig, seed: int, dtype=torch.float32) -> tuple[PeerNet, PeerNet]:
    """Two independently initialised peers with identical architecture."""
    return build_peer(arch, 2 * seed + 1, dtype), build_peer(arch, 2 * seed + 2, dtype)


def reparam_sample(mu: torch.Tensor, var: torch.Tensor, noise=None) -> torch.Tensor:
    """z = mu + sqrt(var) * eps with eps ~ N(0, I).

    ``noise`` is either a precomputed eps tensor, a ``torch.Generator`` or an
    int seed; ``None`` uses the global torch RNG.
    """
    if isinstance(noise, torch.Tensor):
        eps = noise
    else:
        gen = noise
        if isinstance(noise, int):
            gen = torch.Generator().manual_seed(noise)
        eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
    return mu + torch.sqrt(var) * eps
