"""Desk-scale detection experiments: toy world, cross-generator matrix, noise ablation, epsilon sweep.

Random streams are tagged by purpose, so train, validation and test draws
never share a substream.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from findlab import __version__
from findlab.ddpm import DdpmModel, checkpoint_hash, linear_schedule, load_checkpoint, sample, save_checkpoint, train_ddpm
from findlab.dire import ReconConfig, TimingRecord, dire_feature, read_timing_csv, timing_compare, train_dire, write_timing_csv
from findlab.find import LabeledBatch, NoiseConfig, TrainConfig, project_image, train_find
from findlab.mixture import GaussianMixture, gmm_sample
from findlab.numerics import Rng

ABLATION_ROWS = (
    frozenset(),
    frozenset({"N"}),
    frozenset({"N", "RwN"}),
    frozenset({"SwN"}),
    frozenset({"RwN", "SwN"}),
    frozenset({"RwN"}),
)
METHODS = ("find", "baseline", "dire")
DEFAULT_EPSILON = 50.0


class WorldBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    name: str
    hidden: tuple = (128, 128)
    T: int = 50
    epochs: int = 30
    lr: float = 3e-3
    batch: int = 128
    content_tilt: float = 0.0


@dataclass(frozen=True)
class WorldSpec:
    dim: int = 16
    n_components: int = 32
    mean_range: float = 0.6
    std_range: tuple = (0.03, 0.1)
    image_mode: bool = True
    n_real_train: int = 10000
    x0_clip: float = 1.5
    generators: tuple = (
        GeneratorSpec("gen_a", hidden=(128, 128), epochs=30, content_tilt=3.0),
        GeneratorSpec("gen_b", hidden=(48, 48), epochs=20, content_tilt=3.0),
        GeneratorSpec("gen_c", hidden=(96, 96), T=25, epochs=15, content_tilt=3.0),
    )

    def __post_init__(self):
        if len(self.generators) < 2:
            raise ValueError("a world needs at least two generators")
        names = [g.name for g in self.generators]
        if len(set(names)) != len(names):
            raise ValueError("generator names must be unique")


@dataclass
class ToyWorld:
    spec: WorldSpec
    real_dist: GaussianMixture
    generators: dict
    losses: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def names(self) -> list[str]:
        return list(self.generators)

    def hashes(self) -> dict:
        return {k: checkpoint_hash(m) for k, m in self.generators.items()}

    def to_pixels(self, x) -> np.ndarray:
        return project_image(127.5 * (np.asarray(x) + 1.0)) if self.spec.image_mode else np.asarray(x)

    def real(self, rng: Rng, n: int) -> np.ndarray:
        return self.to_pixels(gmm_sample(self.real_dist, rng, n))

    def synthetic(self, name: str, rng: Rng, n: int) -> np.ndarray:
        return self.to_pixels(sample(self.generators[name], n, "ancestral", rng))

    def save(self, out_dir, seed: int | None = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        hashes = {name: save_checkpoint(m, out / f"{name}.json") for name, m in self.generators.items()}
        meta = {"spec": spec_to_dict(self.spec), "real_dist": self.real_dist.to_dict(),
                "losses": self.losses, "checkpoints": hashes, "seed": seed}
        (out / "world.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        return hashes

    @classmethod
    def load(cls, out_dir) -> "ToyWorld":
        out = Path(out_dir)
        meta = json.loads((out / "world.json").read_text())
        spec = spec_from_dict(meta["spec"])
        gens = {g.name: load_checkpoint(out / f"{g.name}.json") for g in spec.generators}
        return cls(spec, GaussianMixture.from_dict(meta["real_dist"]), gens, meta["losses"])


def spec_to_dict(spec: WorldSpec) -> dict:
    d = asdict(spec)
    d["generators"] = [asdict(g) for g in spec.generators]
    return d


def spec_from_dict(d: dict) -> WorldSpec:
    d = dict(d)
    d["generators"] = tuple(GeneratorSpec(**{**g, "hidden": tuple(g["hidden"])}) for g in d["generators"])
    d["std_range"] = tuple(d["std_range"])
    return WorldSpec(**d)


def sample_real_dist(spec: WorldSpec, rng: Rng) -> GaussianMixture:
    k, d = spec.n_components, spec.dim
    means = rng.uniform(-spec.mean_range, spec.mean_range, size=(k, d))
    std = rng.uniform(*spec.std_range, size=(k, d))
    w = rng.uniform(0.5, 1.5, size=k)
    return GaussianMixture.from_unnormalized(w, means, std ** 2)


def tilted(real_dist: GaussianMixture, tilt: float, rng: Rng) -> GaussianMixture:
    """Same components, weights multiplied by exp(tilt * z_k) with z_k ~ N(0, 1)."""
    if tilt == 0:
        return real_dist
    return GaussianMixture.from_unnormalized(real_dist.weights * np.exp(tilt * rng.normal(real_dist.k)),
                                             real_dist.means, real_dist.variances)


def build_world(spec: WorldSpec, rng: Rng, loss_bar: float = 0.7) -> ToyWorld:
    """Sample the real distribution and train every generator on draws from it.

    Each generator sees real components under its own weight tilt (its
    training corpus), so generators differ in content as well as fidelity.
    A generator whose final epoch loss is not below ``loss_bar * dim`` fails the build.
    """
    real_dist = sample_real_dist(spec, rng.split("real_dist"))
    gens, losses = {}, {}
    for g in spec.generators:
        gr = rng.split(f"gen/{g.name}")
        corpus = tilted(real_dist, g.content_tilt, gr.split("tilt"))
        x = gmm_sample(corpus, gr.split("data"), spec.n_real_train)
        model = DdpmModel.create(spec.dim, gr.split("init"), linear_schedule(g.T), hidden=g.hidden)
        model.x0_clip = spec.x0_clip
        res = train_ddpm(x, model, g.epochs, g.batch, g.lr, gr.split("train"), lr_final=0.05 * g.lr)
        if not res.losses[-1] < loss_bar * spec.dim:
            raise WorldBuildError(f"generator {g.name!r} final loss {res.losses[-1]:.3f} "
                                  f"is not below {loss_bar} * dim")
        model.meta = {"name": g.name}
        gens[g.name] = model
        losses[g.name] = res.losses
    return ToyWorld(spec, real_dist, gens, losses)


@dataclass(frozen=True)
class BenchConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    seeds: tuple = (0, 1, 2, 3, 4)
    epsilon: float = DEFAULT_EPSILON
    eps_values: tuple = (0.0, 5.0, 10.0, 20.0, 50.0, 100.0)
    eps_generator: str = ""
    recon_steps: int = 20
    recon_model: str = ""
    timing_n: int = 1000
    train: TrainConfig = TrainConfig()

    def recon(self, world: ToyWorld) -> ReconConfig:
        return ReconConfig(self.recon_steps, self.recon_model or world.names[0], world.spec.image_mode)


class Datasets:
    """Memoized real/synthetic splits keyed by (seed, split, generator)."""

    def __init__(self, world: ToyWorld, cfg: BenchConfig):
        self.world = world
        self.cfg = cfg
        self._cache = {}
        self.tags_used = set()

    def _size(self, split):
        return {"train": self.cfg.n_train, "val": self.cfg.n_val, "test": self.cfg.n_test}[split]

    def get(self, seed: int, split: str, gen: str) -> LabeledBatch:
        key = (seed, split, gen)
        if key not in self._cache:
            base = Rng(seed).split("data").split(split).split(gen)
            n = self._size(split)
            self.tags_used.update({base.name + "/real", base.name + "/synthetic"})
            self._cache[key] = LabeledBatch.from_classes(
                self.world.real(base.split("real"), n),
                self.world.synthetic(gen, base.split("synthetic"), n))
        return self._cache[key]

    def features(self, seed: int, split: str, gen: str) -> LabeledBatch:
        key = ("dire", seed, split, gen)
        if key not in self._cache:
            b = self.get(seed, split, gen)
            rc = self.cfg.recon(self.world)
            self._cache[key] = LabeledBatch(
                dire_feature(b.images, self.world.generators[rc.model_ref], rc), b.labels)
        return self._cache[key]


def _train_cell(ds: Datasets, method: str, noise: NoiseConfig, seed: int, g: str):
    tr, va = ds.get(seed, "train", g), ds.get(seed, "val", g)
    rng = Rng(seed).split("classifier").split(g)
    if method == "dire":
        rc = ds.cfg.recon(ds.world)
        return train_dire(tr, va, ds.world.generators[rc.model_ref], rc, rng, ds.cfg.train)[0]
    return train_find(tr, va, noise, rng, ds.cfg.train)[0]


def _noise_for(method: str, cfg: BenchConfig) -> NoiseConfig:
    if method == "find":
        return NoiseConfig(cfg.epsilon, frozenset({"RwN"}))
    return NoiseConfig.off()


def noise_matrix(ds: Datasets, method: str, noise: NoiseConfig, seed: int) -> np.ndarray:
    """Accuracy grid: rows = training generator, columns = test generator."""
    names = ds.world.names
    acc = np.zeros((len(names), len(names)))
    for i, g in enumerate(names):
        clf = _train_cell(ds, method, noise, seed, g)
        for j, h in enumerate(names):
            test = ds.features(seed, "test", h) if method == "dire" else ds.get(seed, "test", h)
            acc[i, j] = clf.accuracy(test)
    return acc


def cross_generator_matrix(world: ToyWorld, method: str, cfg: BenchConfig, seed: int,
                           ds: Datasets | None = None) -> np.ndarray:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    ds = ds or Datasets(world, cfg)
    return noise_matrix(ds, method, _noise_for(method, cfg), seed)


def ablation_table(world: ToyWorld, cfg: BenchConfig, seed: int, ds: Datasets | None = None) -> list[dict]:
    """Six variant rows for one seed: mean over the full matrix plus per-test-generator means."""
    ds = ds or Datasets(world, cfg)
    rows = []
    for variants in ABLATION_ROWS:
        nc = NoiseConfig(cfg.epsilon, variants)
        acc = noise_matrix(ds, "baseline" if not variants else "find", nc, seed)
        row = {"variant": nc.label, "seed": seed, "mean_accuracy": float(acc.mean())}
        row.update({h: float(v) for h, v in zip(world.names, acc.mean(axis=0))})
        rows.append(row)
    return rows


def epsilon_sweep(world: ToyWorld, cfg: BenchConfig, seed: int, ds: Datasets | None = None) -> list[dict]:
    """Noise-trained detector on one generator at each epsilon; accuracy averaged over test generators."""
    eps = list(cfg.eps_values)
    if eps != sorted(eps) or 0.0 not in eps:
        raise ValueError("eps values must be ascending and include 0")
    ds = ds or Datasets(world, cfg)
    g = cfg.eps_generator or world.names[0]
    rows = []
    for e in eps:
        clf = _train_cell(ds, "find", NoiseConfig(e, frozenset({"RwN"})), seed, g)
        accs = [clf.accuracy(ds.get(seed, "test", h)) for h in world.names]
        rows.append({"epsilon": float(e), "seed": seed, "accuracy": float(np.mean(accs))})
    return rows


def timing_experiment(world: ToyWorld, cfg: BenchConfig, seed: int) -> list[TimingRecord]:
    ds = Datasets(world, cfg)
    g = world.names[0]
    find_cls = _train_cell(ds, "find", _noise_for("find", cfg), seed, g)
    dire_cls = _train_cell(ds, "dire", NoiseConfig.off(), seed, g)
    rc = cfg.recon(world)
    imgs = world.real(Rng(seed).split("timing"), cfg.timing_n)
    return timing_compare(find_cls, dire_cls, world.generators[rc.model_ref], rc, imgs)


# -- parallel helpers -------------------------------------------------------

_WORKER = {}


def _init_worker(world_dir, cfg):
    _WORKER["world"] = ToyWorld.load(world_dir)
    _WORKER["cfg"] = cfg


def _run_job(job):
    kind, seed, arg = job
    world, cfg = _WORKER["world"], _WORKER["cfg"]
    ds = _WORKER.setdefault(("ds", seed), Datasets(world, cfg))
    if kind == "matrix":
        return cross_generator_matrix(world, arg, cfg, seed, ds)
    if kind == "ablation":
        return ablation_table(world, cfg, seed, ds)
    if kind == "eps":
        return epsilon_sweep(world, cfg, seed, ds)
    raise ValueError(kind)


def run_jobs(jobs, world: ToyWorld, cfg: BenchConfig, world_dir=None, n_jobs: int = 1) -> list:
    """Run (kind, seed, arg) jobs; results come back in job order whatever the worker count."""
    if n_jobs <= 1 or world_dir is None:
        _WORKER.clear()
        _WORKER.update(world=world, cfg=cfg)
        try:
            return [_run_job(j) for j in jobs]
        finally:
            _WORKER.clear()
    with ProcessPoolExecutor(n_jobs, initializer=_init_worker, initargs=(str(world_dir), cfg)) as ex:
        return list(ex.map(_run_job, jobs))


# -- reports ----------------------------------------------------------------

MATRIX_COLUMNS = ["train_gen", "test_gen", "seed", "accuracy"]
EPS_COLUMNS = ["epsilon", "seed", "accuracy"]


@dataclass
class ExperimentReport:
    generators: list[str]
    matrices: dict = field(default_factory=dict)   # method -> list of row dicts
    ablation: list[dict] = field(default_factory=list)
    eps_curve: list[dict] = field(default_factory=list)
    timing: list[TimingRecord] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_hashes: dict = field(default_factory=dict)
    default_epsilon: float = DEFAULT_EPSILON

    def matrix_array(self, method: str, seed: int) -> np.ndarray:
        idx = {g: i for i, g in enumerate(self.generators)}
        acc = np.full((len(idx), len(idx)), np.nan)
        for r in self.matrices[method]:
            if r["seed"] == seed:
                acc[idx[r["train_gen"]], idx[r["test_gen"]]] = r["accuracy"]
        return acc

    def manifest(self) -> dict:
        body = {"config": self.config, "seeds": list(self.seeds)}
        digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
        return {
            "tool": "findlab",
            "tool_version": __version__,
            "config": self.config,
            "seeds": list(self.seeds),
            "generators": list(self.generators),
            "checkpoint_hashes": self.checkpoint_hashes,
            "default_epsilon": self.default_epsilon,
            "methods": sorted(self.matrices),
            "has_ablation": bool(self.ablation),
            "has_eps_curve": bool(self.eps_curve),
            "has_timing": bool(self.timing),
            "config_hash": digest,
        }


def matrix_rows(acc: np.ndarray, names, seed: int) -> list[dict]:
    return [{"train_gen": g, "test_gen": h, "seed": seed, "accuracy": float(acc[i, j])}
            for i, g in enumerate(names) for j, h in enumerate(names)]


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(columns)
        for r in rows:
            wr.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def _read_csv(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def emit_report(report: ExperimentReport, path) -> list[Path]:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for method, rows in sorted(report.matrices.items()):
        p = out / f"matrix_{method}.csv"
        _write_csv(p, MATRIX_COLUMNS, rows)
        written.append(p)
    if report.ablation:
        p = out / "ablation.csv"
        _write_csv(p, ["variant", "seed", "mean_accuracy", *report.generators], report.ablation)
        written.append(p)
    if report.eps_curve:
        p = out / "eps_sweep.csv"
        _write_csv(p, EPS_COLUMNS, report.eps_curve)
        written.append(p)
    if report.timing:
        p = out / "timing.csv"
        write_timing_csv(report.timing, p)
        written.append(p)
    p = out / "manifest.json"
    p.write_text(json.dumps(report.manifest(), sort_keys=True, indent=1) + "\n")
    written.append(p)
    return written


def load_report(path) -> ExperimentReport:
    out = Path(path)
    man = json.loads((out / "manifest.json").read_text())
    gens = man["generators"]
    rep = ExperimentReport(gens, seeds=man["seeds"], config=man["config"],
                           checkpoint_hashes=man["checkpoint_hashes"], default_epsilon=man["default_epsilon"])
    for method in man["methods"]:
        rep.matrices[method] = [{"train_gen": r["train_gen"], "test_gen": r["test_gen"], "seed": int(r["seed"]),
                                 "accuracy": float(r["accuracy"])} for r in _read_csv(out / f"matrix_{method}.csv")]
    if man["has_ablation"]:
        rep.ablation = [{"variant": r["variant"], "seed": int(r["seed"]), "mean_accuracy": float(r["mean_accuracy"]),
                         **{g: float(r[g]) for g in gens}} for r in _read_csv(out / "ablation.csv")]
    if man["has_eps_curve"]:
        rep.eps_curve = [{"epsilon": float(r["epsilon"]), "seed": int(r["seed"]), "accuracy": float(r["accuracy"])}
                         for r in _read_csv(out / "eps_sweep.csv")]
    if man["has_timing"]:
        rep.timing = read_timing_csv(out / "timing.csv")
    return rep
