"""PNG figures for finished runs: accuracy and loss curves, clean-probability histograms."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import read_metrics  # noqa: E402


def plot_runs(run_dirs, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    runs = [(Path(rd).name, read_metrics(rd)) for rd in run_dirs]
    written = []

    fig, (ax_acc, ax_auc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, m in runs:
        ep = [r["epoch"] for r in m]
        if m and m[0].get("test_accuracy") is not None:
            ax_acc.plot(ep, [r["test_accuracy"] for r in m], label=name)
        if m and m[0].get("codivide_auc") is not None:
            ax_auc.plot(ep, [r["codivide_auc"] for r in m], label=name)
    ax_acc.set(xlabel="epoch", ylabel="test accuracy")
    ax_auc.set(xlabel="epoch", ylabel="co-divide AUC")
    ax_acc.legend(fontsize=7)
    fig.tight_layout()
    written.append(out_dir / "accuracy.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    terms = ("recon_nll", "noisy_nll", "kl_y", "kl_z")
    fig, axes = plt.subplots(1, len(terms) + 1, figsize=(15, 3))
    for name, m in runs:
        ep = [r["epoch"] for r in m]
        for ax, term in zip(axes, terms):
            ax.plot(ep, [np.mean([pm["vi"][term] for pm in r["models"]]) for r in m], label=name)
            ax.set_title(term, fontsize=9)
        axes[-1].plot(ep, [np.mean([pm["dm"] for pm in r["models"]]) for r in m], label=name)
    axes[-1].set_title("semi-supervised loss", fontsize=9)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    written.append(out_dir / "losses.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    for name, m in runs:
        if not m or "w_hist" not in m[-1]:
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        hist = np.asarray(m[-1]["w_hist"])
        edges = np.linspace(0, 1, hist.shape[1] + 1)
        for k, h in enumerate(hist):
            ax.stairs(h, edges, label=f"net {k + 1}")
        ax.set(xlabel="clean probability w", ylabel="count", title=f"{name}, epoch {m[-1]['epoch']}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        written.append(out_dir / f"w_hist_{name}.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    return written
