"""Reconstruction-error baseline: classify |x - R(I(x))| from deterministic inversion."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from findlab.ddpm import ddim_move
from findlab.find import Classifier, LabeledBatch, NoiseConfig, TrainConfig, TrainLog, _train_classifier
from findlab.numerics import Rng


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    steps: int = 20
    model_ref: str = ""
    image_mode: bool = True

    def check(self, model) -> None:
        if not 1 <= self.steps <= model.T:
            raise ValueError(f"steps={self.steps} outside [1, {model.T}]")
        if not getattr(model, "trained", False):
            raise UntrainedModelError("reconstruction model has not been trained")


def to_model_space(x, cfg: ReconConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / 127.5 - 1.0 if cfg.image_mode else x


def to_input_space(z, cfg: ReconConfig) -> np.ndarray:
    return (z + 1.0) * 127.5 if cfg.image_mode else z


def invert(x, model, cfg: ReconConfig) -> np.ndarray:
    """Deterministic inversion t = 1..steps, noise predicted at the destination step."""
    cfg.check(model)
    z = np.atleast_2d(to_model_space(x, cfg))
    sched = model.schedule
    for t in range(1, cfg.steps + 1):
        eps = model.predict_eps(z, t)
        z = ddim_move(z, eps, sched.ab(t - 1), sched.ab(t))
    return z


def reconstruct(latent, model, cfg: ReconConfig) -> np.ndarray:
    """Deterministic reverse pass t = steps..1, back in input space."""
    cfg.check(model)
    z = np.atleast_2d(np.asarray(latent, dtype=np.float64))
    sched = model.schedule
    for t in range(cfg.steps, 0, -1):
        z = ddim_move(z, model.predict_eps(z, t), sched.ab(t), sched.ab(t - 1), model.x0_clip)
    return to_input_space(z, cfg)


def dire_feature(x, model, cfg: ReconConfig) -> np.ndarray:
    """Elementwise absolute reconstruction residual, one row per input row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.abs(x - reconstruct(invert(x, model, cfg), model, cfg))


def feature_normalizer(features: np.ndarray):
    """Per-dimension standardization; constant columns keep unit scale."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    scale = np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0), 1.0)
    return scale, -mu * scale


def train_dire(train: LabeledBatch, val: LabeledBatch, model, cfg: ReconConfig, rng: Rng,
               tc: TrainConfig = TrainConfig()) -> tuple[Classifier, TrainLog]:
    """Same loop as the noise-trained detector with noise off, on residual features."""
    ftr = LabeledBatch(dire_feature(train.images, model, cfg), train.labels)
    fva = LabeledBatch(dire_feature(val.images, model, cfg), val.labels)
    scale, shift = feature_normalizer(ftr.images)
    return _train_classifier(ftr, fva, NoiseConfig.off(), tc, rng, scale, shift)


@dataclass(frozen=True)
class TimingRecord:
    method: str
    rec_ms: float
    cls_ms: float
    total_ms: float
    throughput: float

    @classmethod
    def from_times(cls, method: str, rec_s: float, cls_s: float, n: int) -> "TimingRecord":
        rec_ms = 1e3 * rec_s / n
        cls_ms = 1e3 * cls_s / n
        total = rec_ms + cls_ms
        return cls(method, rec_ms, cls_ms, total, 1e3 / total if total > 0 else float("inf"))


TIMING_COLUMNS = ["method", "rec_ms", "cls_ms", "total_ms", "throughput"]


def write_timing_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TIMING_COLUMNS)
        for r in records:
            wr.writerow([r.method, repr(r.rec_ms), repr(r.cls_ms), repr(r.total_ms), repr(r.throughput)])


def read_timing_csv(path) -> list[TimingRecord]:
    with open(path) as fh:
        return [TimingRecord(r["method"], float(r["rec_ms"]), float(r["cls_ms"]), float(r["total_ms"]),
                             float(r["throughput"])) for r in csv.DictReader(fh)]


def timing_compare(find_cls: Classifier, dire_cls: Classifier, model, cfg: ReconConfig, images,
                   batch: int = 96, warmup: int = 2) -> list[TimingRecord]:
    """Per-image inference cost over all ``images``, in batches.

    ``warmup`` untimed passes over the first batch run beforehand. The
    detector without reconstruction reports a reconstruction time of exactly 0.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    batches = [images[i:i + batch] for i in range(0, n, batch)]
    for _ in range(warmup):
        find_cls.logits(batches[0])
        dire_cls.logits(dire_feature(batches[0], model, cfg))

    cls_find = 0.0
    for b in batches:
        t0 = time.perf_counter()
        find_cls.logits(b)
        cls_find += time.perf_counter() - t0

    rec, cls_dire = 0.0, 0.0
    for b in batches:
        t0 = time.perf_counter()
        feats = dire_feature(b, model, cfg)
        t1 = time.perf_counter()
        dire_cls.logits(feats)
        rec += t1 - t0
        cls_dire += time.perf_counter() - t1
    return [TimingRecord.from_times("DIRE", rec, cls_dire, n),
            TimingRecord.from_times("FIND", 0.0, cls_find, n)]
