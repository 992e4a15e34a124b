# %% [markdown]
# # Splitting a noisy set with a two-component mixture
#
# After a short warmup the network fits clean labels before noisy ones, so the
# per-example loss is bimodal.  A 1-D Gaussian mixture on the normalised loss
# gives each example a probability w of being clean.

# %%
import numpy as np

from instancegm import trainer
from instancegm.codivide import co_divide, roc_auc
from instancegm.config import TrainConfig
from instancegm.datasets import inject_idn, synth_shapes

ds = inject_idn(synth_shapes(4, 100, 16, seed=0), 0.4, seed=1)
cfg = TrainConfig(warmup_epochs=5, batch_size=32)
dual = trainer.warmup(trainer.new_dual(ds, cfg), ds, cfg)

# %%
part, gmm = co_divide(dual.nets[0], ds, tau=cfg.tau)
clean = ~ds.flip_mask()
print("component means", np.round(gmm.means, 3), "weights", np.round(gmm.weights, 3))
print("EM iterations", gmm.n_iter, "log-likelihood", round(gmm.log_likelihoods[-1], 2))
print(f"labelled {len(part.labelled_idx)} / {len(ds)}; AUC of w vs clean = {roc_auc(part.w, clean):.3f}")

# %% [markdown]
# How pure is the labelled side?  Compare with the base rate of clean labels.

# %%
print("clean fraction overall", clean.mean().round(3))
print("clean fraction among labelled", clean[part.labelled_idx].mean().round(3))
print("clean fraction among unlabelled", clean[part.unlabelled_idx].mean().round(3))

# %% [markdown]
# The two networks see slightly different data orders, so their w differ.
# During training each network learns from the split its peer produced.

# %%
ws = trainer.codivide_both(dual, ds, cfg)
a, b = trainer.cross_partitions(ws, cfg.tau)
print("corr(w1, w2) =", np.corrcoef(ws[0], ws[1])[0, 1].round(3))
print("net 1 trains on", len(a.labelled_idx), "labelled; net 2 on", len(b.labelled_idx))
