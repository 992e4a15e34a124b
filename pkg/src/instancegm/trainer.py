"""Warmup, the co-divide training loop, evaluation and run-directory I/O.

A run directory holds ``config.json``, ``metrics.jsonl`` (one record per
main-loop epoch), ``timing.jsonl`` (wall-clock seconds, kept apart so that
``metrics.jsonl`` is reproducible byte for byte), ``ckpt_<epoch>/`` and
``report.csv``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .codivide import (CoDividePartition, clean_posterior, fit_gmm2, normalise_losses,
                       partition, raw_sample_ce, roc_auc)
from .config import TrainConfig
from .datasets import MissingCleanLabelsError, NoisyDataset
from .networks import ArchConfig, PeerNet, build_dual, eval_mode
from .semisup import build_mix_batch, dividemix_loss
from .vi import variational_free_energy

log = logging.getLogger(__name__)

CKPT_VERSION = 1
DETERMINISTIC_ENV = "INSTANCEGM_DETERMINISTIC"


class NumericError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def set_deterministic(flag: Optional[bool] = None) -> bool:
    """Force deterministic kernels and a single intra-op thread.

    With ``flag=None`` the ``INSTANCEGM_DETERMINISTIC`` environment variable decides.
    """
    if flag is None:
        flag = os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0")
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return flag


@dataclass
class DualModel:
    net1: PeerNet
    net2: PeerNet

    @property
    def nets(self) -> tuple[PeerNet, PeerNet]:
        return (self.net1, self.net2)


def arch_for(ds: NoisyDataset, cfg: TrainConfig) -> ArchConfig:
    h, w, c = ds.image_shape
    return ArchConfig(height=h, width=w, channels=c, num_classes=ds.num_classes, d_z=cfg.d_z,
                      backbone=cfg.backbone, width_scale=cfg.width_scale, clf_width=cfg.clf_width)


def new_dual(ds: NoisyDataset, cfg: TrainConfig, dtype=torch.float32) -> DualModel:
    return DualModel(*build_dual(arch_for(ds, cfg), cfg.seed, dtype))


def _rng(cfg: TrainConfig, *key: int):
    np_rng = np.random.default_rng([cfg.seed, *key])
    gen = torch.Generator().manual_seed(int(np_rng.integers(2**62)))
    return np_rng, gen


def _batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    idx = rng.permutation(idx)
    return [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at {where}")


# ---------------------------------------------------------------------------
# classifiers and evaluation

class Classifier:
    """Callable mapping a (N, H, W, C) image array to clean-class probabilities."""

    def __init__(self, nets):
        self.nets = list(nets)

    @torch.no_grad()
    def __call__(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        dtype = next(self.nets[0].parameters()).dtype
        out = []
        with eval_mode(*self.nets):
            for start in range(0, len(images), batch_size):
                x = torch.as_tensor(images[start:start + batch_size], dtype=dtype)
                out.append(torch.stack([n.clean_probs(x) for n in self.nets]).mean(0))
        return torch.cat(out).double().numpy()


def final_classifier(dual: DualModel, cfg: TrainConfig) -> Classifier:
    return Classifier(dual.nets if cfg.ensemble_eval else [dual.net1])


def evaluate(classifier: Callable, test_ds: NoisyDataset) -> float:
    """Fraction of test images whose argmax prediction equals the clean label."""
    clean = test_ds.require_clean()
    scores = np.asarray(classifier(test_ds.images))
    return float(np.mean(scores.argmax(1) == clean))


# ---------------------------------------------------------------------------
# optimisers

def make_optimizers(net: PeerNet, cfg: TrainConfig):
    if cfg.unified_optimizer:
        sgd = torch.optim.SGD(net.parameters(), lr=cfg.lr_disc, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
        return [sgd]
    sgd = torch.optim.SGD(net.discriminative_parameters(), lr=cfg.lr_disc,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    adam = torch.optim.Adam(net.generative_parameters(), lr=cfg.lr_gen)
    return [sgd, adam]


def _set_sgd_lr(opts, cfg: TrainConfig, epoch: int) -> None:
    lr = cfg.lr_disc * (0.1 if epoch >= cfg.epochs // 2 and cfg.epochs > 1 else 1.0)
    for g in opts[0].param_groups:
        g["lr"] = lr


# ---------------------------------------------------------------------------
# warmup and the plain cross-entropy baseline

def _ce_epoch(net: PeerNet, opt, x_all, y_all, cfg: TrainConfig, rng, where: str) -> float:
    net.train()
    total, count = 0.0, 0
    for b, idx in enumerate(_batches(np.arange(len(x_all)), cfg.batch_size, rng)):
        logits = net.clean_classifier(x_all[idx])
        loss = F.cross_entropy(logits, y_all[idx])
        _check_finite(loss, f"{where} batch {b}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += float(loss.detach()) * len(idx)
        count += len(idx)
    return total / max(count, 1)


def _tensors(ds: NoisyDataset, dtype=torch.float32):
    return (torch.as_tensor(ds.images, dtype=dtype),
            torch.as_tensor(ds.noisy_labels, dtype=torch.long))


def warmup(dual: DualModel, ds: NoisyDataset, cfg: TrainConfig) -> DualModel:
    """Cross-entropy training of both clean classifiers on the noisy labels.

    Only clean-classifier parameters are updated.
    """
    x_all, y_all = _tensors(ds, next(dual.net1.parameters()).dtype)
    for k, net in enumerate(dual.nets):
        opt = torch.optim.SGD(net.clean_classifier.parameters(), lr=cfg.lr_disc,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        for e in range(cfg.warmup_epochs):
            rng, _ = _rng(cfg, 0, e, k)
            _ce_epoch(net, opt, x_all, y_all, cfg, rng, f"warmup epoch {e} net {k + 1}")
    return dual


def train_ce_baseline(ds: NoisyDataset, cfg: TrainConfig, test_ds: Optional[NoisyDataset] = None):
    """Plain cross-entropy on the noisy labels for warmup_epochs + epochs.

    Uses net 1 of the dual built from ``cfg.seed`` and the same SGD schedule
    as the main loop.  Returns (classifier, test accuracy or None).
    """
    dual = new_dual(ds, cfg)
    net = dual.net1
    x_all, y_all = _tensors(ds)
    opt = torch.optim.SGD(net.clean_classifier.parameters(), lr=cfg.lr_disc,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    total = cfg.warmup_epochs + cfg.epochs
    for e in range(total):
        if e >= cfg.warmup_epochs:
            _set_sgd_lr([opt], cfg, e - cfg.warmup_epochs)
        rng, _ = _rng(cfg, 3, e)
        _ce_epoch(net, opt, x_all, y_all, cfg, rng, f"baseline epoch {e}")
    clf = Classifier([net])
    return clf, (evaluate(clf, test_ds) if test_ds is not None else None)


# ---------------------------------------------------------------------------
# main loop

def codivide_both(dual: DualModel, ds: NoisyDataset, cfg: TrainConfig):
    """Clean probabilities from each net's own losses: returns (w_net1, w_net2)."""
    ws = []
    for net in dual.nets:
        losses = normalise_losses(raw_sample_ce(net, ds.images, ds.noisy_labels))
        g = fit_gmm2(losses, max_iter=cfg.gmm_max_iter, tol=cfg.gmm_tol, seed=cfg.seed)
        ws.append(clean_posterior(g, losses))
    return tuple(ws)


def cross_partitions(w_own: tuple, tau: float) -> tuple[CoDividePartition, CoDividePartition]:
    """Partition used to train each net, built from the OTHER net's clean probabilities."""
    w1, w2 = w_own
    return partition(w2, tau), partition(w1, tau)


def train_peer_epoch(net: PeerNet, peer: PeerNet, opts, part: CoDividePartition,
                     x_all, y_all, num_classes: int, cfg: TrainConfig, epoch: int, k: int) -> dict:
    """One pass over ``net``'s labelled set minimising free energy + semi-supervised loss."""
    if len(part.labelled_idx) == 0:
        raise RuntimeError(f"epoch {epoch} net {k + 1}: labelled set is empty; lower tau")
    rng, gen = _rng(cfg, 1, epoch, k)
    lab_batches = _batches(part.labelled_idx, cfg.batch_size, rng)
    unl = part.unlabelled_idx
    unl_batches = _batches(unl, cfg.batch_size, rng) if len(unl) else []
    w_t = torch.as_tensor(part.w, dtype=x_all.dtype)
    eye = torch.eye(num_classes, dtype=x_all.dtype)
    peer.eval()
    net.train()
    sums = {"recon_nll": 0.0, "noisy_nll": 0.0, "kl_y": 0.0, "kl_z": 0.0, "total": 0.0, "dm": 0.0}
    for b, idx_l in enumerate(lab_batches):
        x_l, yh_l = x_all[idx_l], eye[y_all[idx_l]]
        idx_u = unl_batches[b % len(unl_batches)] if unl_batches else np.empty(0, dtype=int)
        x_u = x_all[idx_u] if len(idx_u) else None
        if cfg.use_dividemix:
            mb = build_mix_batch(net, peer, x_l, yh_l, w_t[idx_l], x_u, cfg, rng, gen)
            dm = dividemix_loss(net, mb, epoch + b / len(lab_batches), cfg)
        else:
            dm = F.cross_entropy(net.clean_classifier(x_l), y_all[idx_l])
        if cfg.vi_on_labelled_only or x_u is None:
            x_vi, yh_vi = x_l, yh_l
        else:
            x_vi, yh_vi = torch.cat([x_l, x_u]), torch.cat([yh_l, eye[y_all[idx_u]]])
        terms = variational_free_energy(x_vi, yh_vi, net, noise=gen, label_mode=cfg.label_mode,
                                        cb_recon=cfg.use_cb_recon).mean()
        loss = terms.total + dm
        _check_finite(loss, f"epoch {epoch} net {k + 1} batch {b}")
        for opt in opts:
            opt.zero_grad()
        loss.backward()
        for opt in opts:
            opt.step()
        for name, v in (("recon_nll", terms.recon_nll), ("noisy_nll", terms.noisy_nll),
                        ("kl_y", terms.kl_y), ("kl_z", terms.kl_z), ("total", terms.total),
                        ("dm", dm)):
            sums[name] += float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    n = len(lab_batches)
    return {"vi": {k2: sums[k2] / n for k2 in ("recon_nll", "noisy_nll", "kl_y", "kl_z", "total")},
            "dm": sums["dm"] / n, "n_labelled": int(len(part.labelled_idx))}


@dataclass
class TrainResult:
    classifier: Classifier
    dual: DualModel
    metrics: list = field(default_factory=list)
    run_dir: Optional[Path] = None


W_BINS = 10


def _codivide_auc(ws, ds: NoisyDataset):
    if ds.clean_labels is None:
        return None, [None, None]
    clean = ~ds.flip_mask()
    per = [roc_auc(w, clean) for w in ws]
    return float(np.mean(per)), per


def train(dual: DualModel, ds: NoisyDataset, cfg: TrainConfig,
          test_ds: Optional[NoisyDataset] = None, run_dir=None,
          start_epoch: int = 0, optimizer_states=None) -> TrainResult:
    """Main loop over ``cfg.epochs`` epochs after warmup; returns the final clean classifier.

    Each epoch fits the loss mixture on both nets, trains net k on the
    partition derived from the other net's losses, then evaluates.  With
    ``run_dir`` set, metrics and checkpoints are written there.
    """
    dtype = next(dual.net1.parameters()).dtype
    x_all, y_all = _tensors(ds, dtype)
    opts = [make_optimizers(net, cfg) for net in dual.nets]
    if optimizer_states is not None:
        for net_opts, states in zip(opts, optimizer_states):
            for opt, st in zip(net_opts, states):
                opt.load_state_dict(st)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.json")
        _truncate_jsonl(run_dir / "metrics.jsonl", start_epoch)
        _truncate_jsonl(run_dir / "timing.jsonl", start_epoch)
        if start_epoch == 0:
            checkpoint_save(run_dir, dual, 0, cfg, opts)
    metrics = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        for net_opts in opts:
            _set_sgd_lr(net_opts, cfg, epoch)
        ws = codivide_both(dual, ds, cfg)
        parts = cross_partitions(ws, cfg.tau)
        per_model = []
        for k, (net, peer) in enumerate(((dual.net1, dual.net2), (dual.net2, dual.net1))):
            per_model.append(train_peer_epoch(net, peer, opts[k], parts[k], x_all, y_all,
                                              ds.num_classes, cfg, epoch, k))
        auc, auc_per = _codivide_auc(ws, ds)
        acc = evaluate(final_classifier(dual, cfg), test_ds) if test_ds is not None else None
        rec = {"epoch": epoch + 1, "models": per_model, "test_accuracy": acc,
               "codivide_auc": auc, "codivide_auc_per_model": auc_per,
               "w_hist": [np.histogram(w, bins=W_BINS, range=(0.0, 1.0))[0].tolist() for w in ws]}
        metrics.append(rec)
        wall = time.perf_counter() - t0
        log.info("epoch %d acc=%s auc=%s (%.1fs)", epoch + 1, acc, auc, wall)
        if run_dir is not None:
            _append_jsonl(run_dir / "metrics.jsonl", rec)
            _append_jsonl(run_dir / "timing.jsonl", {"epoch": epoch + 1, "wall_seconds": wall})
            last = epoch + 1 == cfg.epochs
            if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                checkpoint_save(run_dir, dual, epoch + 1, cfg, opts)
    if run_dir is not None:
        write_report(run_dir / "report.csv", [run_dir])
    return TrainResult(final_classifier(dual, cfg), dual, metrics, run_dir)


def run(ds: NoisyDataset, cfg: TrainConfig, test_ds: Optional[NoisyDataset] = None,
        run_dir=None) -> TrainResult:
    """Build, warm up and train a fresh dual model."""
    dual = warmup(new_dual(ds, cfg), ds, cfg)
    return train(dual, ds, cfg, test_ds=test_ds, run_dir=run_dir)


def resume(run_dir, ds: NoisyDataset, test_ds: Optional[NoisyDataset] = None,
           epoch: Optional[int] = None) -> TrainResult:
    """Continue a run from its checkpoint at ``epoch`` (latest if omitted)."""
    run_dir = Path(run_dir)
    if epoch is None:
        epoch = latest_checkpoint(run_dir)
    dual, cfg, states, done = checkpoint_load(run_dir / f"ckpt_{epoch}")
    return train(dual, ds, cfg, test_ds=test_ds, run_dir=run_dir,
                 start_epoch=done, optimizer_states=states)


# ---------------------------------------------------------------------------
# files

def _append_jsonl(path: Path, rec: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def _truncate_jsonl(path: Path, keep: int) -> None:
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(lines[:keep]), encoding="utf-8")


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


def checkpoint_save(run_dir, dual: DualModel, epoch: int, cfg: TrainConfig, opts=None) -> Path:
    path = Path(run_dir) / f"ckpt_{epoch}"
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    payload = {"net1": dual.net1.state_dict(), "net2": dual.net2.state_dict()}
    if opts is not None:
        payload["optimizers"] = [[o.state_dict() for o in net_opts] for net_opts in opts]
    torch.save(payload, path / "weights.pt")
    meta = {"format_version": CKPT_VERSION, "arch_config": dual.net1.cfg.to_dict(),
            "seed": cfg.seed, "epoch": epoch, "train_config": cfg.to_dict(),
            "dtype": str(next(dual.net1.parameters()).dtype).replace("torch.", "")}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def checkpoint_load(path):
    """Load ``ckpt_<epoch>/``; returns (dual, cfg, optimizer states or None, epoch)."""
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}/meta.json: {e}") from e
    if not isinstance(meta, dict) or meta.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format "
                              f"{meta.get('format_version') if isinstance(meta, dict) else meta!r}")
    try:
        arch = ArchConfig(**meta["arch_config"])
        cfg = TrainConfig.from_dict(meta["train_config"])
        epoch = int(meta["epoch"])
        dtype = getattr(torch, meta.get("dtype", "float32"))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"{path}/meta.json: {e}") from e
    payload = torch.load(path / "weights.pt", weights_only=True)
    nets = build_dual(arch, cfg.seed, dtype)
    try:
        nets[0].load_state_dict(payload["net1"])
        nets[1].load_state_dict(payload["net2"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path}: weights do not match arch_config ({e})") from e
    return DualModel(*nets), cfg, payload.get("optimizers"), epoch


def latest_checkpoint(run_dir) -> int:
    eps = [int(p.name.split("_", 1)[1]) for p in Path(run_dir).glob("ckpt_*")
           if p.name.split("_", 1)[1].isdigit()]
    if not eps:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    return max(eps)


REPORT_FIELDS = ["run", "use_dividemix", "use_cb_recon", "seed", "epochs",
                 "test_accuracy", "codivide_auc"]


def write_report(path, run_dirs) -> Path:
    """One CSV row per run: key ablation flags, final test accuracy, final co-divide AUC."""
    rows = []
    for rd in run_dirs:
        rd = Path(rd)
        cfg = TrainConfig.load(rd / "config.json")
        m = read_metrics(rd)
        last = m[-1] if m else {}
        rows.append({"run": rd.name, "use_dividemix": cfg.use_dividemix,
                     "use_cb_recon": cfg.use_cb_recon, "seed": cfg.seed, "epochs": cfg.epochs,
                     "test_accuracy": last.get("test_accuracy"),
                     "codivide_auc": last.get("codivide_auc")})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return Path(path)
