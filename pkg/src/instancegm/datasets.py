"""Synthetic image datasets, label-noise injection and the on-disk format.

Images are held in memory as float32 arrays of shape (N, H, W, C) whose
values are multiples of 1/255, so that the uint8 payload round-trips
exactly.  Labels are held as integer class indices; the one-hot views are
available as properties.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

MANIFEST = "manifest.json"
IMAGES = "images.bin"
LABELS_NOISY = "labels_noisy.bin"
LABELS_CLEAN = "labels_clean.bin"
NOISE_KINDS = ("none", "symmetric", "idn")

# per-instance flip rates: N(rate, IDN_STD^2) truncated to [0, 1]
IDN_STD = 0.1
# rank correlation between the flip rate and a projection of the image
IDN_RATE_COUPLING = 0.7


class DatasetFormatError(ValueError):
    """Manifest and payload files disagree or are malformed."""


class MissingCleanLabelsError(RuntimeError):
    """An operation needs ground-truth labels the dataset does not carry."""


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class NoisyDataset:
    images: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    clean_labels: Optional[np.ndarray] = None
    noise_kind: str = "none"
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        if self.clean_labels is not None:
            self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        if self.images.ndim != 4 or min(self.images.shape[1:]) < 1:
            raise ValueError(f"images must have shape (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.noisy_labels):
            raise ValueError("images and noisy_labels differ in length")
        if self.clean_labels is not None and len(self.clean_labels) != len(self.images):
            raise ValueError("images and clean_labels differ in length")
        for labels in (self.noisy_labels, self.clean_labels):
            if labels is not None and len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError("label index out of range")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def noisy_onehot(self) -> np.ndarray:
        return one_hot(self.noisy_labels, self.num_classes)

    @property
    def clean_onehot(self) -> np.ndarray:
        return one_hot(self.require_clean(), self.num_classes)

    def require_clean(self) -> np.ndarray:
        if self.clean_labels is None:
            raise MissingCleanLabelsError("dataset has no clean labels")
        return self.clean_labels

    def flip_mask(self) -> np.ndarray:
        """Boolean mask of examples whose noisy label differs from the clean one."""
        return self.noisy_labels != self.require_clean()

    def subset(self, idx) -> "NoisyDataset":
        idx = np.asarray(idx)
        return dataclasses.replace(
            self,
            images=self.images[idx],
            noisy_labels=self.noisy_labels[idx],
            clean_labels=None if self.clean_labels is None else self.clean_labels[idx],
        )

    def equals(self, other: "NoisyDataset") -> bool:
        same_clean = (self.clean_labels is None) == (other.clean_labels is None)
        if same_clean and self.clean_labels is not None:
            same_clean = np.array_equal(self.clean_labels, other.clean_labels)
        return (
            same_clean
            and self.num_classes == other.num_classes
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.noisy_labels, other.noisy_labels)
            and self.noise_kind == other.noise_kind
            and self.noise_rate == other.noise_rate
            and self.seed == other.seed
        )


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# synthetic shapes

def _shape_mask(kind: int, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if kind == 0:  # disc
        return dx**2 + dy**2 <= r**2
    if kind == 1:  # square
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if kind == 2:  # upward triangle
        return (dy <= 0.7 * r) & (dy >= -r) & (np.abs(dx) <= 0.5 * (dy + r))
    # plus sign
    return (np.minimum(np.abs(dx), np.abs(dy)) <= 0.3 * r) & (np.maximum(np.abs(dx), np.abs(dy)) <= r)


def synth_shapes(num_classes: int, n_per_class: int, side: int, seed: int,
                 pixel_noise: float = 0.08) -> NoisyDataset:
    """Procedural RGB images of filled shapes, one class per (shape, quadrant) pair.

    Class ``k`` draws shape ``k % 4``; for more than four classes the shape is
    also placed in quadrant ``k // 4`` (quadrant 0 is the image centre when
    there are four classes or fewer).  Size, position, colours and additive
    pixel noise are jittered per image.
    """
    if not 2 <= num_classes <= 16:
        raise ValueError("num_classes must be in [2, 16]")
    if side < 8:
        raise ValueError("side must be at least 8")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    n = num_classes * n_per_class
    labels = np.repeat(np.arange(num_classes), n_per_class)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    quarter = side / 4.0
    centres = {0: (side / 2, side / 2)} if num_classes <= 4 else {
        0: (quarter, quarter), 1: (quarter, 3 * quarter),
        2: (3 * quarter, quarter), 3: (3 * quarter, 3 * quarter)}
    images = np.empty((n, side, side, 3), dtype=np.float64)
    for i, k in enumerate(labels):
        cy, cx = centres[k // 4]
        scale = side / 4.0 if num_classes > 4 else side / 2.0
        r = scale * rng.uniform(0.55, 0.8)
        jitter = scale - r
        cy = cy + rng.uniform(-jitter, jitter) * 0.5
        cx = cx + rng.uniform(-jitter, jitter) * 0.5
        mask = _shape_mask(k % 4, yy - cy, xx - cx, r)
        # the shape is brighter than the background in every channel
        bg = rng.uniform(0.0, 0.45, size=3)
        fg = rng.uniform(0.55, 1.0, size=3)
        img = np.where(mask[..., None], fg, bg)
        img = img + rng.normal(0.0, pixel_noise, size=img.shape)
        images[i] = img
    pixels = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return NoisyDataset(images=_to_unit(pixels), noisy_labels=labels.copy(),
                        clean_labels=labels.copy(), num_classes=num_classes,
                        noise_kind="none", noise_rate=0.0, seed=seed)


# ---------------------------------------------------------------------------
# label noise

def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ValueError("noise rate must be in [0, 1)")


def _sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] > cdf).sum(axis=1)


def _idn_draws(ds: NoisyDataset, rate: float, seed: int, std: float, coupling: float):
    clean = ds.require_clean()
    _check_rate(rate)
    n, k = len(ds), ds.num_classes
    rng = np.random.default_rng(seed)
    flat = ds.images.reshape(n, -1).astype(np.float64)
    d = flat.shape[1]
    w = rng.standard_normal((k, d, k))
    v = rng.standard_normal(d)
    eps = rng.standard_normal(n)

    score = flat @ v
    score = (score - score.mean()) / (score.std() + 1e-12)
    latent = coupling * score + np.sqrt(1.0 - coupling**2) * eps
    u = (stats.rankdata(latent, method="ordinal") - 0.5) / n
    if rate == 0.0:
        q = np.zeros(n)
    else:
        a, b = (0.0 - rate) / std, (1.0 - rate) / std
        q = stats.truncnorm.ppf(u, a, b, loc=rate, scale=std)

    logits = np.einsum("nd,ndk->nk", flat, w[clean]) / np.sqrt(d)
    logits[np.arange(n), clean] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    p *= q[:, None]
    p[np.arange(n), clean] += 1.0 - q
    return p, q, score


def idn_transition_rows(ds: NoisyDataset, rate: float, seed: int,
                        std: float = IDN_STD, coupling: float = IDN_RATE_COUPLING) -> np.ndarray:
    """Per-example noisy-label distributions for instance-dependent noise.

    Row i puts mass 1 - q_i on the clean class and spreads q_i over the other
    classes by a softmax of a fixed random projection of the image.  The flip
    rates q_i follow N(rate, std^2) truncated to [0, 1]; they are assigned to
    examples through a Gaussian copula on a second random projection, so the
    chance of being flipped also depends on the image.
    """
    return _idn_draws(ds, rate, seed, std, coupling)[0]


def idn_flip_rates(ds: NoisyDataset, rate: float, seed: int, std: float = IDN_STD,
                   coupling: float = IDN_RATE_COUPLING) -> tuple[np.ndarray, np.ndarray]:
    """Per-example flip rates q_i and the standardised image projection they are coupled to."""
    _, q, score = _idn_draws(ds, rate, seed, std, coupling)
    return q, score


def inject_idn(ds: NoisyDataset, rate: float, seed: int,
               std: float = IDN_STD, coupling: float = IDN_RATE_COUPLING) -> NoisyDataset:
    """Resample noisy labels with instance-dependent noise; images are untouched."""
    probs = idn_transition_rows(ds, rate, seed, std=std, coupling=coupling)
    u = np.random.default_rng([seed, 1]).uniform(size=len(ds))
    noisy = _sample_rows(probs, u)
    if rate == 0.0:
        noisy = ds.clean_labels.copy()
    return dataclasses.replace(ds, noisy_labels=noisy, noise_kind="idn",
                               noise_rate=float(rate), seed=seed)


def inject_symmetric(ds: NoisyDataset, rate: float, seed: int) -> NoisyDataset:
    """Flip each label with probability ``rate`` to a uniformly chosen other class."""
    clean = ds.require_clean()
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    flip = rng.uniform(size=len(ds)) < rate
    offset = rng.integers(1, ds.num_classes, size=len(ds))
    noisy = np.where(flip, (clean + offset) % ds.num_classes, clean)
    return dataclasses.replace(ds, noisy_labels=noisy, noise_kind="symmetric",
                               noise_rate=float(rate), seed=seed)


# ---------------------------------------------------------------------------
# persistence

def save_dataset(ds: NoisyDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, h, w, c = ds.images.shape
    manifest = {
        "num_examples": n, "height": h, "width": w, "channels": c,
        "num_classes": ds.num_classes, "noise_kind": ds.noise_kind,
        "noise_rate": ds.noise_rate, "seed": ds.seed,
    }
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    pixels.tofile(directory / IMAGES)
    ds.noisy_labels.astype("<u2").tofile(directory / LABELS_NOISY)
    clean_path = directory / LABELS_CLEAN
    if ds.clean_labels is not None:
        ds.clean_labels.astype("<u2").tofile(clean_path)
    elif clean_path.exists():
        os.remove(clean_path)
    with open(directory / MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return directory


def _read_exact(path: Path, dtype, count: int) -> np.ndarray:
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise DatasetFormatError(f"{path.name}: expected {count} values, found {data.size}")
    return data


def load_dataset(directory) -> NoisyDataset:
    directory = Path(directory)
    if not (directory / MANIFEST).is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    try:
        with open(directory / MANIFEST, encoding="utf-8") as f:
            m = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"bad manifest: {e}") from e
    keys = {"num_examples", "height", "width", "channels", "num_classes",
            "noise_kind", "noise_rate", "seed"}
    if set(m) != keys:
        raise DatasetFormatError(f"manifest keys {sorted(m)} != {sorted(keys)}")
    n, h, w, c = (int(m[k]) for k in ("num_examples", "height", "width", "channels"))
    for name in (IMAGES, LABELS_NOISY):
        if not (directory / name).is_file():
            raise FileNotFoundError(f"missing {name} in {directory}")
    pixels = _read_exact(directory / IMAGES, np.uint8, n * h * w * c).reshape(n, h, w, c)
    noisy = _read_exact(directory / LABELS_NOISY, "<u2", n).astype(np.int64)
    clean = None
    if (directory / LABELS_CLEAN).is_file():
        clean = _read_exact(directory / LABELS_CLEAN, "<u2", n).astype(np.int64)
    try:
        return NoisyDataset(images=_to_unit(pixels),
                            noisy_labels=noisy, clean_labels=clean,
                            num_classes=int(m["num_classes"]), noise_kind=m["noise_kind"],
                            noise_rate=float(m["noise_rate"]), seed=int(m["seed"]))
    except ValueError as e:
        raise DatasetFormatError(str(e)) from e
