"""Neuron-wise gating of a small classifier's first layer.

Trains a rectifier network with 2-gated first-layer rows at increasing
penalties and reports how many hidden neurons keep nonzero input weights.

    python3 demos/neuron_gating.py
"""

import numpy as np

from dgating.experiments import decay_problem
from dgating.gating import collapse
from dgating.grouping import active_groups
from dgating.optim import TrainConfig, sgd_train

model, data, omega, v = decay_problem("mlp")

for lam in (0.0, 1.0, 4.0, 16.0):
    cfg = TrainConfig(lam=lam, depth=2, iters=2000, lr=0.05, schedule="constant", momentum=0.9)
    res = sgd_train(model, data, cfg, omega, init_v=v)
    w = collapse(res.params)
    acc = float(np.mean(model.predict(data.X, w, res.v) == data.y))
    alive = len(active_groups(model.partition, w, 1e-6))
    print(f"lam={lam:<5} train accuracy={acc:.3f} active neurons={alive}/{model.partition.n_groups}")
