"""Train a small DDPM on a 2-D mixture, sample it both ways and score the samples.

The KL is taken from an EM fit of the samples to the target, since samples
carry no density of their own.
"""

import time

import numpy as np

from findlab.ddpm import DdpmModel, sample, train_ddpm
from findlab.em import sample_kl
from findlab.mixture import GaussianMixture, gmm_sample
from findlab.numerics import Rng

target = GaussianMixture(
    np.array([0.35, 0.35, 0.3]),
    np.array([[-1.2, -0.7], [1.2, -0.7], [0.0, 1.2]]),
    np.array([[0.25, 0.2], [0.2, 0.25], [0.25, 0.25]]),
)

rng = Rng(0)
data = gmm_sample(target, rng.split("data"), 20000)
model = DdpmModel.create(2, rng.split("init"), hidden=(64, 64))
model.x0_clip = 4.0
t0 = time.perf_counter()
res = train_ddpm(data, model, epochs=40, batch=128, lr=3e-3, rng=rng.split("train"), lr_final=1.5e-4)
print(f"trained {len(res.losses)} epochs in {time.perf_counter() - t0:.1f} s, "
      f"loss {res.losses[0]:.3f} -> {res.losses[-1]:.3f}")

for mode in ("deterministic", "ancestral"):
    x = sample(model, 20000, mode, Rng(1))
    kl = sample_kl(x, target, Rng(2), n_mc=20000)
    print(f"{mode:13s} samples: KL to target {kl.estimate:.4f} +- {kl.stderr:.4f} nats, mean {np.round(x.mean(0), 3)}")
