"""Noise-disturbance training: noised real images join the batch labelled synthetic.

Labels follow one fixed convention everywhere: 0 = synthetic, 1 = real.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from findlab.numerics import Mlp, Rng, Sgd, TrainingDivergence, backward_cached, forward_cached

SYNTHETIC, REAL = 0, 1
PIXEL_MAX = 255.0
VARIANTS = ("RwN", "N", "SwN")


def project_image(x) -> np.ndarray:
    """Clip onto the pixel cube [0, 255]^d."""
    return np.clip(x, 0.0, PIXEL_MAX)


@dataclass
class LabeledBatch:
    """Rows of ``images`` (n, d) in pixel space with integer ``labels`` (n,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.labels.shape != (len(self.images),):
            raise ValueError("images must be (n, d) with one label per row")
        if not np.all(np.isin(self.labels, (SYNTHETIC, REAL))):
            raise ValueError("labels must be 0 (synthetic) or 1 (real)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    @classmethod
    def from_classes(cls, real, synthetic) -> "LabeledBatch":
        real = np.asarray(real, dtype=np.float64)
        synthetic = np.asarray(synthetic, dtype=np.float64)
        return cls(np.concatenate([real, synthetic]),
                   np.concatenate([np.full(len(real), REAL), np.full(len(synthetic), SYNTHETIC)]))

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class NoiseConfig:
    epsilon: float = 50.0
    variants: frozenset = frozenset({"RwN"})
    copies_per_image: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variants", frozenset(self.variants))
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.copies_per_image < 1:
            raise ValueError("copies_per_image must be >= 1")
        unknown = self.variants - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown noise variants {sorted(unknown)}")

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(variants=frozenset())

    def n_appended(self, n_real: int, n_synth: int) -> int:
        per = self.copies_per_image
        return per * (n_real * (("RwN" in self.variants) + ("N" in self.variants))
                      + n_synth * ("SwN" in self.variants))

    @property
    def label(self) -> str:
        order = [v for v in ("N", "RwN", "SwN") if v in self.variants]
        return "+".join(order) if order else "none"


def add_noise(x, epsilon: float, rng: Rng) -> np.ndarray:
    """Project(x + epsilon * eta), eta ~ N(0, I); works on one image or a stack."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return project_image(x)
    return project_image(x + epsilon * rng.normal(x.shape))


def augment_batch(b: LabeledBatch, cfg: NoiseConfig, rng: Rng) -> LabeledBatch:
    """Originals first, in order; then noised reals, pure-noise images, noised synthetics.

    Every appended row is labelled synthetic.
    """
    real = b.images[b.labels == REAL]
    synth = b.images[b.labels == SYNTHETIC]
    extra = []
    for _ in range(cfg.copies_per_image):
        if "RwN" in cfg.variants and len(real):
            extra.append(add_noise(real, cfg.epsilon, rng))
        if "N" in cfg.variants and len(real):
            extra.append(add_noise(np.full_like(real, 128.0), cfg.epsilon, rng))
        if "SwN" in cfg.variants and len(synth):
            extra.append(add_noise(synth, cfg.epsilon, rng))
    if not extra:
        return LabeledBatch(b.images.copy(), b.labels.copy())
    added = np.concatenate(extra)
    return LabeledBatch(np.concatenate([b.images, added]),
                        np.concatenate([b.labels, np.full(len(added), SYNTHETIC)]))


@dataclass
class Classifier:
    """Scalar-logit MLP behind a fixed affine input map ``x * in_scale + in_shift``.

    The default map sends pixels [0, 255] to [-1, 1].
    """

    net: Mlp
    in_scale: np.ndarray | float = 1.0 / 127.5
    in_shift: np.ndarray | float = -1.0
    threshold: float = 0.0

    def normalize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.in_scale + self.in_shift

    def logits(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.net.in_dim:
            raise ValueError(f"input dim {x.shape[1]} does not match classifier dim {self.net.in_dim}")
        return forward_cached(self.net, self.normalize(x))[-1][:, 0]

    def labels(self, x) -> np.ndarray:
        return (self.logits(x) > self.threshold).astype(np.int64)

    def accuracy(self, b: LabeledBatch) -> float:
        return float(np.mean(self.labels(b.images) == b.labels))

    def copy(self) -> "Classifier":
        return Classifier(self.net.copy(), np.copy(self.in_scale), np.copy(self.in_shift), self.threshold)

    def to_dict(self) -> dict:
        return {"version": 1, "kind": "classifier", "net": self.net.to_dict(),
                "in_scale": np.asarray(self.in_scale).tolist(),
                "in_shift": np.asarray(self.in_shift).tolist(), "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        if d.get("kind") != "classifier":
            raise ValueError("not a classifier checkpoint")
        return cls(Mlp.from_dict(d["net"]), np.asarray(d["in_scale"]), np.asarray(d["in_shift"]),
                   d["threshold"])


def predict(c: Classifier, x) -> tuple[int, float]:
    """Label and logit for a single image. Label 1 (real) only when logit > threshold."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict takes one image; use Classifier.labels for a stack")
    z = float(c.logits(x[None])[0])
    return (REAL if z > c.threshold else SYNTHETIC), z


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss), (p - y) / len(z)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch: int = 96
    lr: float = 0.05
    momentum: float = 0.9
    hidden: tuple = (64, 64)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    batch_sizes: list[tuple[int, int]] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, ["epoch", "train_loss", "val_accuracy", "batch_items", "augmented_items"])
            wr.writeheader()
            wr.writerows(self.rows)


def _train_classifier(train: LabeledBatch, val: LabeledBatch, noise: NoiseConfig, tc: TrainConfig,
                      rng: Rng, in_scale=1.0 / 127.5, in_shift=-1.0):
    if len(np.unique(train.labels)) < 2:
        raise ValueError("training data must contain both classes")
    net = Mlp.init([train.dim, *tc.hidden, 1], rng.split("init"), output_kind="scalar-logit")
    clf = Classifier(net, in_scale, in_shift)
    opt = Sgd(tc.lr, momentum=tc.momentum)
    log = TrainLog()
    best, best_acc = clf.copy(), -1.0
    n = len(train)
    for epoch in range(tc.epochs):
        er = rng.split(f"epoch{epoch}")
        order = er.permutation(n)
        tot, seen, items, added = 0.0, 0, 0, 0
        for i, lo in enumerate(range(0, n, tc.batch)):
            b = train.take(order[lo:lo + tc.batch])
            bb = augment_batch(b, noise, er.split(f"b{i}"))
            n_real = int(np.sum(b.labels == REAL))
            expect = len(b) + noise.n_appended(n_real, len(b) - n_real)
            if len(bb) != expect:
                raise AssertionError("augmented batch size does not match variant arithmetic")
            log.batch_sizes.append((len(b), len(bb)))
            acts = forward_cached(net, clf.normalize(bb.images))
            loss, g = bce_with_logits(acts[-1][:, 0], bb.labels.astype(np.float64))
            if not np.isfinite(loss):
                raise TrainingDivergence(f"loss not finite at epoch {epoch} batch {i}")
            opt.step(net, backward_cached(net, acts, g[:, None]))
            tot += loss * len(bb)
            seen += len(bb)
            items += len(b)
            added += len(bb) - len(b)
        acc = clf.accuracy(val)
        log.rows.append({"epoch": epoch, "train_loss": tot / seen, "val_accuracy": acc,
                         "batch_items": items, "augmented_items": added})
        if acc > best_acc:
            best, best_acc, log.best_epoch = clf.copy(), acc, epoch
    return best, log


def train_find(train: LabeledBatch, val: LabeledBatch, cfg: NoiseConfig, rng: Rng,
               tc: TrainConfig = TrainConfig()) -> tuple[Classifier, TrainLog]:
    """Train on noise-augmented batches; keep the epoch with the best (un-augmented) val accuracy.

    Ties go to the earliest epoch.
    """
    return _train_classifier(train, val, cfg, tc, rng)
