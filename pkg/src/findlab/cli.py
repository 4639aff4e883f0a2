"""Command-line entry: one subcommand per experiment, one flat ``key = value`` config.

    findlab all --seed 7 --out runs/s7
    findlab matrix --config my.cfg --set find.epsilon=20 --set bench.n_seeds=3
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from findlab.bench import (
    METHODS,
    BenchConfig,
    ExperimentReport,
    GeneratorSpec,
    ToyWorld,
    WorldSpec,
    build_world,
    emit_report,
    load_report,
    matrix_rows,
    run_jobs,
    spec_to_dict,
    timing_experiment,
)
from findlab.em import EmConfig, GridSpec, fig3_experiment
from findlab.find import TrainConfig
from findlab.numerics import Rng

COMMANDS = ("fig3", "build-world", "matrix", "ablation", "eps-sweep", "timing", "all")
EXIT_CONFIG, EXIT_FAILURE = 2, 3


class ConfigError(ValueError):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def _defaults() -> dict:
    w, b, t = WorldSpec(), BenchConfig(), TrainConfig()
    d = {
        "fig3.noise_var": 1.5,
        "fig3.k": 2,
        "fig3.reps": 5,
        "fig3.n_samples": 20000,
        "fig3.grid_lo": -12.0,
        "fig3.grid_hi": 12.0,
        "fig3.grid_points": 1001,
        "world.dim": w.dim,
        "world.n_components": w.n_components,
        "world.mean_range": w.mean_range,
        "world.std_min": w.std_range[0],
        "world.std_max": w.std_range[1],
        "world.image_mode": w.image_mode,
        "world.n_real_train": w.n_real_train,
        "world.x0_clip": w.x0_clip,
        "bench.n_train": b.n_train,
        "bench.n_val": b.n_val,
        "bench.n_test": b.n_test,
        "bench.n_seeds": len(b.seeds),
        "bench.methods": list(METHODS),
        "find.epsilon": b.epsilon,
        "eps.values": list(b.eps_values),
        "eps.generator": b.eps_generator,
        "recon.steps": b.recon_steps,
        "recon.model": b.recon_model,
        "timing.n": b.timing_n,
        "train.epochs": t.epochs,
        "train.batch": t.batch,
        "train.lr": t.lr,
        "train.momentum": t.momentum,
        "train.hidden": list(t.hidden),
    }
    for g in w.generators:
        for f in ("hidden", "T", "epochs", "lr", "batch", "content_tilt"):
            v = getattr(g, f)
            d[f"gen.{g.name}.{f}"] = list(v) if isinstance(v, tuple) else v
    return d


DEFAULTS = _defaults()


def _parse_value(key: str, raw: str):
    proto = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(proto, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(proto, list):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        kind = type(proto[0]) if proto else str
        return [kind(s) for s in items]
    try:
        return type(proto)(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {type(proto).__name__}, got {raw!r}") from None


def parse_pairs(lines, source: str) -> tuple[dict, list[str]]:
    """``key = value`` lines (``#`` comments, blank lines ignored) -> (values, problems)."""
    out, problems = {}, []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{n}: expected key = value")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            problems.append(f"unknown key {key!r} ({source})")
            continue
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as e:
            problems.append(f"{e} ({source})")
    return out, problems


def resolve_config(config_path=None, overrides=()) -> dict:
    """Defaults, then the config file, then ``--set`` overrides; every problem reported at once."""
    cfg = dict(DEFAULTS)
    problems = []
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise ConfigError([f"cannot read config {config_path}: {e.strerror}"]) from None
        vals, bad = parse_pairs(text.splitlines(), str(config_path))
        cfg.update(vals)
        problems += bad
    vals, bad = parse_pairs(overrides, "--set")
    cfg.update(vals)
    problems += bad
    problems += _semantic_problems(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _semantic_problems(cfg: dict) -> list[str]:
    bad = [m for m in cfg["bench.methods"] if m not in METHODS]
    problems = [f"bench.methods: unknown method {m!r}" for m in bad]
    if cfg["bench.n_seeds"] < 1:
        problems.append("bench.n_seeds must be >= 1")
    if cfg["world.std_min"] > cfg["world.std_max"]:
        problems.append("world.std_min must not exceed world.std_max")
    eps = cfg["eps.values"]
    if eps != sorted(eps) or 0.0 not in eps:
        problems.append("eps.values must be ascending and include 0")
    names = [g.name for g in WorldSpec().generators]
    for key in ("eps.generator", "recon.model"):
        if cfg[key] and cfg[key] not in names:
            problems.append(f"{key}: unknown generator {cfg[key]!r}")
    return problems


def world_spec(cfg: dict) -> WorldSpec:
    gens = []
    for g in WorldSpec().generators:
        p = f"gen.{g.name}."
        gens.append(GeneratorSpec(g.name, tuple(cfg[p + "hidden"]), cfg[p + "T"], cfg[p + "epochs"],
                                  cfg[p + "lr"], cfg[p + "batch"], cfg[p + "content_tilt"]))
    return WorldSpec(cfg["world.dim"], cfg["world.n_components"], cfg["world.mean_range"],
                     (cfg["world.std_min"], cfg["world.std_max"]), cfg["world.image_mode"],
                     cfg["world.n_real_train"], cfg["world.x0_clip"], tuple(gens))


def bench_config(cfg: dict, seed: int) -> BenchConfig:
    tc = TrainConfig(cfg["train.epochs"], cfg["train.batch"], cfg["train.lr"], cfg["train.momentum"],
                     tuple(cfg["train.hidden"]))
    return BenchConfig(cfg["bench.n_train"], cfg["bench.n_val"], cfg["bench.n_test"],
                       tuple(seed + i for i in range(cfg["bench.n_seeds"])), cfg["find.epsilon"],
                       tuple(cfg["eps.values"]), cfg["eps.generator"], cfg["recon.steps"],
                       cfg["recon.model"], cfg["timing.n"], tc)


class Runner:
    """Runs subcommands against one output directory, sharing the world checkpoint."""

    def __init__(self, cfg: dict, seed: int, out, jobs: int):
        self.cfg = cfg
        self.seed = seed
        self.out = Path(out)
        self.jobs = jobs
        self.bench = bench_config(cfg, seed)
        self.world_dir = self.out / "world"
        self._world = None
        self._report = None

    def _echo(self, msg: str):
        print(msg, flush=True)

    def fig3(self):
        c = self.cfg
        res = fig3_experiment(noise_var=c["fig3.noise_var"], cfg=EmConfig(k=c["fig3.k"]), reps=c["fig3.reps"],
                              n_samples=c["fig3.n_samples"],
                              grid=GridSpec(c["fig3.grid_lo"], c["fig3.grid_hi"], c["fig3.grid_points"]),
                              rng=Rng(self.seed).split("fig3"))
        res.write(self.out)
        self._echo(f"fig3 mse_before={res.mse_before:.6e} mse_after={res.mse_after:.6e} "
                   f"drop={res.drop_factor:.2f}")

    def _saved_world_matches(self, spec: WorldSpec) -> bool:
        meta = self.world_dir / "world.json"
        if not meta.exists():
            return False
        saved = json.loads(meta.read_text())
        return saved.get("seed") == self.seed and saved["spec"] == json.loads(json.dumps(spec_to_dict(spec)))

    def world(self) -> ToyWorld:
        if self._world is None:
            spec = world_spec(self.cfg)
            if self._saved_world_matches(spec):
                self._world = ToyWorld.load(self.world_dir)
                self._echo(f"world reused from {self.world_dir}")
            else:
                self._world = build_world(spec, Rng(self.seed).split("world"))
                self._world.save(self.world_dir, seed=self.seed)
                self._echo(f"world built: {', '.join(self._world.names)}")
        return self._world

    def report(self) -> ExperimentReport:
        if self._report is None:
            w = self.world()
            rep = ExperimentReport(w.names, seeds=list(self.bench.seeds), config=dict(self.cfg),
                                   checkpoint_hashes=w.hashes(), default_epsilon=self.bench.epsilon)
            man = self.out / "manifest.json"
            if man.exists():
                old = load_report(self.out)
                if old.manifest()["config_hash"] == rep.manifest()["config_hash"]:
                    rep.matrices, rep.ablation = old.matrices, old.ablation
                    rep.eps_curve, rep.timing = old.eps_curve, old.timing
            self._report = rep
        return self._report

    def _emit(self):
        emit_report(self.report(), self.out)

    def build_world(self):
        self.world()

    def matrix(self):
        rep, seeds = self.report(), self.bench.seeds
        methods = self.cfg["bench.methods"]
        jobs = [("matrix", s, m) for m in methods for s in seeds]
        results = run_jobs(jobs, self.world(), self.bench, self.world_dir, self.jobs)
        for m in methods:
            rep.matrices[m] = [r for (_, s, mm), acc in zip(jobs, results) if mm == m
                               for r in matrix_rows(acc, rep.generators, s)]
            mean = np.mean([acc.mean() for (_, _, mm), acc in zip(jobs, results) if mm == m])
            self._echo(f"matrix {m} mean_accuracy={mean:.4f}")
        self._emit()

    def ablation(self):
        rep = self.report()
        results = run_jobs([("ablation", s, None) for s in self.bench.seeds], self.world(), self.bench,
                           self.world_dir, self.jobs)
        rep.ablation = [row for rows in results for row in rows]
        for v in dict.fromkeys(r["variant"] for r in rep.ablation):
            mean = np.mean([r["mean_accuracy"] for r in rep.ablation if r["variant"] == v])
            self._echo(f"ablation {v} mean_accuracy={mean:.4f}")
        self._emit()

    def eps_sweep(self):
        rep = self.report()
        results = run_jobs([("eps", s, None) for s in self.bench.seeds], self.world(), self.bench,
                           self.world_dir, self.jobs)
        rep.eps_curve = [row for rows in results for row in rows]
        self._emit()
        self._echo(f"eps-sweep {len(rep.eps_curve)} rows, default epsilon {self.bench.epsilon:g}")

    def timing(self):
        rep = self.report()
        rep.timing = timing_experiment(self.world(), self.bench, self.bench.seeds[0])
        self._emit()
        for r in rep.timing:
            self._echo(f"timing {r.method} total_ms={r.total_ms:.4f}")

    def run(self, command: str):
        self.out.mkdir(parents=True, exist_ok=True)
        steps = {
            "fig3": [self.fig3],
            "build-world": [self.build_world],
            "matrix": [self.matrix],
            "ablation": [self.ablation],
            "eps-sweep": [self.eps_sweep],
            "timing": [self.timing],
        }
        if command == "all":
            todo = [f for c in ("fig3", "build-world", "matrix", "ablation", "eps-sweep", "timing") for f in steps[c]]
        else:
            todo = steps[command]
        for step in todo:
            step()


def _error(kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "message": message, **extra}, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="findlab", description="Desk-scale noise-disturbance detection experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=0, help="run seed; bench seeds are seed .. seed + n_seeds - 1")
    p.add_argument("--out", default="findlab-out", help="output directory (reports, world checkpoints)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for per-seed jobs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                   help="override one config key; repeatable")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides)
    except ConfigError as e:
        print(_error("config", str(e), problems=e.problems), file=sys.stderr)
        return EXIT_CONFIG
    try:
        Runner(cfg, args.seed, args.out, args.jobs).run(args.command)
    except Exception as e:  # noqa: BLE001 - every failure becomes an error record
        rec = _error("experiment", str(e), type=type(e).__name__, command=args.command)
        print(rec, file=sys.stderr)
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "error.json").write_text(rec + "\n")
        except OSError:
            pass
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
