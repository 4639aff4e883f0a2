"""Reconstruction residuals and per-image cost: DIRE against the noise-trained detector.

A diffusion model reconstructs its own samples more faithfully than real data,
which is what DIRE relies on. It pays for that with an inversion and a
reconstruction per image, while the noise-trained detector runs one forward pass.
"""

import numpy as np

from findlab.bench import BenchConfig, GeneratorSpec, WorldSpec, build_world, timing_experiment
from findlab.dire import ReconConfig, dire_feature
from findlab.find import TrainConfig
from findlab.numerics import Rng

spec = WorldSpec(
    dim=8,
    n_components=16,
    n_real_train=4000,
    generators=(
        GeneratorSpec("g1", hidden=(64, 64), T=25, epochs=12, content_tilt=3.0),
        GeneratorSpec("g2", hidden=(24, 24), T=25, epochs=8, content_tilt=3.0),
    ),
)
world = build_world(spec, Rng(1).split("world"))

for g in world.names:
    rc = ReconConfig(10, g, image_mode=True)
    real = np.linalg.norm(dire_feature(world.real(Rng(2), 1000), world.generators[g], rc), axis=1)
    own = np.linalg.norm(dire_feature(world.synthetic(g, Rng(3), 1000), world.generators[g], rc), axis=1)
    print(f"{g}: median residual  real {np.median(real):.2f}  own samples {np.median(own):.2f}")

cfg = BenchConfig(n_train=500, n_val=100, n_test=100, seeds=(0,), recon_steps=20, timing_n=1000,
                  train=TrainConfig(epochs=5, hidden=(32,)))
for r in timing_experiment(world, cfg, 0):
    print(f"{r.method:5s} rec {r.rec_ms:.4f} ms  cls {r.cls_ms:.5f} ms  total {r.total_ms:.4f} ms/image")
