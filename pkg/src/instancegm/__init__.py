"""Learning with instance-dependent label noise: a DivideMix-style co-divide pipeline
joined to a generative model of how noisy labels arise."""
from .config import TrainConfig, paper_profile
from .datasets import NoisyDataset, inject_idn, inject_symmetric, load_dataset, save_dataset, synth_shapes
from .trainer import evaluate, resume, run, train, train_ce_baseline, warmup

__all__ = ["TrainConfig", "paper_profile", "NoisyDataset", "inject_idn", "inject_symmetric",
           "load_dataset", "save_dataset", "synth_shapes", "evaluate", "resume", "run", "train",
           "train_ce_baseline", "warmup"]
__version__ = "0.1.0"
