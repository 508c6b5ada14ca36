"""Does masking by geometry help?

Train the same model twice per seed, once with geometry-aware masking and once
without it (plain attention, jitter still on), and compare object-level AUROC.
Individual seeds are noisy; the mean over seeds is the number to look at.

Pass the number of seeds as the first argument (default 2).  Each seed trains
two models, a little over three minutes per seed on one core.  The acceptance
suite runs the same comparison over five seeds.
"""
import sys

import numpy as np

from geomask.datasets import BenchmarkConfig, build_benchmark
from geomask.model import ModelConfig
from geomask.pipeline import TrainConfig, evaluate, train

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
ds = build_benchmark(BenchmarkConfig(n_points=1024), seed=7)

scores = {True: [], False: []}
for seed in seeds:
    for use_agma in (True, False):
        cfg = ModelConfig(groups=64, group_size=32, use_agma=use_agma)
        model = train(ds, TrainConfig(epochs=30, lr=1e-3, lr_drop_epoch=24, seed=seed, model=cfg)).model
        scores[use_agma].append(evaluate(ds, model)["mean"]["o_auroc"])
    print(f"seed {seed}: with masking {scores[True][-1]:.3f}   without {scores[False][-1]:.3f}")

print(f"\nmean O-AUROC with masking {np.mean(scores[True]):.3f}, without {np.mean(scores[False]):.3f}")
