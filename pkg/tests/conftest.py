import time

import numpy as np
import pytest

from findlab import cli
from findlab.bench import BenchConfig, GeneratorSpec, WorldSpec, build_world
from findlab.find import TrainConfig
from findlab.mixture import GaussianMixture
from findlab.numerics import Rng

# small enough for unit tests, same code paths as the default world
TINY_SPEC = WorldSpec(
    dim=4,
    n_components=16,
    n_real_train=3000,
    generators=(
        GeneratorSpec("g1", hidden=(32, 32), T=20, epochs=6, content_tilt=2.0),
        GeneratorSpec("g2", hidden=(16, 16), T=20, epochs=4, content_tilt=2.0),
    ),
)
TINY_BENCH = BenchConfig(
    n_train=200, n_val=100, n_test=200, seeds=(0, 1), eps_values=(0.0, 5.0, 50.0),
    recon_steps=5, timing_n=100, train=TrainConfig(epochs=3, hidden=(16,)),
)

TARGET_2D = GaussianMixture(
    np.array([0.35, 0.35, 0.3]),
    np.array([[-1.2, -0.7], [1.2, -0.7], [0.0, 1.2]]),
    np.array([[0.25, 0.2], [0.2, 0.25], [0.25, 0.25]]),
)


@pytest.fixture(scope="session")
def tiny_world():
    return build_world(TINY_SPEC, Rng(3).split("world"), loss_bar=0.95)


@pytest.fixture(scope="session")
def trained_2d():
    """2-D DDPM on TARGET_2D plus its training set; takes a few seconds."""
    from findlab.ddpm import DdpmModel, train_ddpm
    from findlab.mixture import gmm_sample

    rng = Rng(0)
    data = gmm_sample(TARGET_2D, rng.split("data"), 20000)
    model = DdpmModel.create(2, rng.split("init"), hidden=(64, 64))
    model.x0_clip = 4.0
    t0 = time.perf_counter()
    res = train_ddpm(data, model, epochs=40, batch=128, lr=3e-3, rng=rng.split("train"), lr_final=1.5e-4)
    return res, data, time.perf_counter() - t0


class DefaultRuns:
    def __init__(self, first, second, seconds, codes):
        self.first = first
        self.second = second
        self.seconds = seconds
        self.codes = codes


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    """``all --seed 7`` on the default config, twice, into separate directories."""
    dirs, secs, codes = [], [], []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"run{i}")
        t0 = time.perf_counter()
        codes.append(cli.main(["all", "--seed", "7", "--out", str(out)]))
        secs.append(time.perf_counter() - t0)
        dirs.append(out)
    return DefaultRuns(dirs[0], dirs[1], secs, codes)
