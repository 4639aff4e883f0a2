"""Small MLP diffusion model: forward noising, epsilon-prediction training, reverse sampling.

``alpha_bar[t-1]`` is the cumulative signal coefficient at step t (t = 1..T);
the one-step forward coefficient is sqrt(alpha_bar_t / alpha_bar_{t-1}) with
alpha_bar_0 = 1.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from findlab.numerics import Adam, Mlp, Rng, Sgd, TrainingDivergence, backward_cached, forward_cached

CHECKPOINT_VERSION = 1
MODES = ("ancestral", "deterministic")


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 1:
            raise ValueError("alpha_bar must be a non-empty 1-D sequence")
        if np.any(ab <= 0) or np.any(ab >= 1):
            raise ValueError("alpha_bar entries must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] >= 0.01:
            raise ValueError(f"terminal alpha_bar {ab[-1]:.4g} is not below 0.01")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size

    def ab(self, t: int) -> float:
        """alpha_bar_t with alpha_bar_0 = 1."""
        self.check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def step_ratio(self, t: int) -> float:
        return self.ab(t) / self.ab(t - 1)

    def check_step(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")


def linear_schedule(T: int = 50, beta_start: float = 1e-3, beta_end: float | None = None) -> NoiseSchedule:
    """Per-step noise 1 - alpha_bar_t/alpha_bar_{t-1} rising linearly from beta_start to beta_end.

    The default beta_end = 10/T puts alpha_bar_T near exp(-5) for any T.
    """
    beta_end = min(10.0 / T, 0.999) if beta_end is None else beta_end
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(np.cumprod(1.0 - betas))


def time_embedding(t, T: int, n_freq: int = 4) -> np.ndarray:
    """[t/T, sin(pi 2^k t/T), cos(pi 2^k t/T) for k < n_freq], one row per entry of t."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    ang = np.pi * s[:, None] * (2.0 ** np.arange(n_freq))[None]
    return np.concatenate([s[:, None], np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DdpmModel:
    schedule: NoiseSchedule
    eps_net: Mlp
    dim: int
    n_freq: int = 4
    trained: bool = False
    x0_clip: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        emb = 1 + 2 * self.n_freq
        if self.eps_net.in_dim != self.dim + emb or self.eps_net.out_dim != self.dim:
            raise ValueError("eps_net must map dim + embedding inputs to dim outputs")

    @classmethod
    def create(cls, dim: int, rng: Rng, schedule: NoiseSchedule | None = None,
               hidden=(64, 64), n_freq: int = 4) -> "DdpmModel":
        schedule = schedule or linear_schedule()
        sizes = [dim + 1 + 2 * n_freq, *hidden, dim]
        return cls(schedule, Mlp.init(sizes, rng), dim, n_freq)

    @property
    def T(self) -> int:
        return self.schedule.T

    def net_input(self, x: np.ndarray, t) -> np.ndarray:
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        return np.concatenate([x, time_embedding(t, self.T, self.n_freq)], axis=1)

    def predict_eps(self, x: np.ndarray, t) -> np.ndarray:
        """Predicted noise for a batch x at step t (scalar or one per row)."""
        return forward_cached(self.eps_net, self.net_input(x, t))[-1]

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "kind": "ddpm",
            "dim": self.dim,
            "n_freq": self.n_freq,
            "trained": self.trained,
            "x0_clip": self.x0_clip,
            "alpha_bar": self.schedule.alpha_bar.tolist(),
            "eps_net": self.eps_net.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DdpmModel":
        if d.get("kind") != "ddpm" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 ddpm checkpoint")
        return cls(NoiseSchedule(np.asarray(d["alpha_bar"])), Mlp.from_dict(d["eps_net"]),
                   d["dim"], d["n_freq"], d["trained"], d["x0_clip"], d.get("meta", {}))


class ConstantEpsOracle:
    """Noise predictor that always returns one fixed epsilon.

    Paired with the deterministic update, it reproduces the exact trajectory
    x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps for every t, so inversion and
    reconstruction invert each other exactly.
    """

    trained = True
    x0_clip = None

    def __init__(self, schedule: NoiseSchedule, eps):
        self.schedule = schedule
        self.eps = np.asarray(eps, dtype=np.float64)
        self.dim = self.eps.shape[-1]

    @property
    def T(self) -> int:
        return self.schedule.T

    def predict_eps(self, x, t):
        return np.broadcast_to(self.eps, np.shape(x)).copy()


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


def forward_transition(x_prev, t: int, sched: NoiseSchedule, rng: Rng) -> np.ndarray:
    """One forward noising step t-1 -> t."""
    sched.check_step(t)
    r = sched.step_ratio(t)
    x = np.asarray(x_prev, dtype=np.float64)
    return np.sqrt(r) * x + np.sqrt(1.0 - r) * rng.normal(x.shape)


def forward_marginal(x0, t: int, sched: NoiseSchedule, rng: Rng | None = None, eps=None):
    """Jump straight to step t; returns (x_t, eps)."""
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = rng.normal(x0.shape)
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.ab(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def predict_x0(x, eps, ab: float, clip: float | None = None):
    """Clean-sample estimate implied by eps at level ab; returns (x0_hat, eps).

    With ``clip`` set, x0_hat is clipped to [-clip, clip] and eps is
    re-derived so the pair stays consistent with x.
    """
    x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if clip is not None and np.any(np.abs(x0_hat) > clip):
        x0_hat = np.clip(x0_hat, -clip, clip)
        eps = (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    return x0_hat, eps


def ddim_move(x, eps, ab_from: float, ab_to: float, clip: float | None = None) -> np.ndarray:
    """Deterministic update between two noise levels along the predicted-noise direction."""
    x0_hat, eps = predict_x0(x, eps, ab_from, clip)
    return np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * eps


def reverse_step(x_t, t: int, model, mode: str = "deterministic", rng: Rng | None = None) -> np.ndarray:
    """One reverse step t -> t-1.

    Deterministic mode moves along the predicted noise with no fresh noise.
    Ancestral mode samples the Gaussian posterior q(x_{t-1} | x_t, x0_hat).
    ``model.x0_clip`` (if set) bounds x0_hat in both modes.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sched = model.schedule
    sched.check_step(t)
    xb, single = _batch(x_t)
    eps = model.predict_eps(xb, t)
    ab_t, ab_prev = sched.ab(t), sched.ab(t - 1)
    if mode == "deterministic":
        out = ddim_move(xb, eps, ab_t, ab_prev, model.x0_clip)
    else:
        x0_hat, _ = predict_x0(xb, eps, ab_t, model.x0_clip)
        beta = 1.0 - ab_t / ab_prev
        mean = (np.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0_hat \
            + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)) * xb
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        out = mean if var == 0.0 else mean + np.sqrt(var) * rng.normal(xb.shape)
    return out[0] if single else out


def sample(model, n: int, mode: str = "ancestral", rng: Rng | None = None,
           clip: tuple[float, float] | None = None) -> np.ndarray:
    """Start from N(0, I) at step T and run reverse_step down to 1."""
    if n == 0:
        return np.empty((0, model.dim))
    x = rng.split("x_T").normal((n, model.dim))
    step_rng = rng.split("steps")
    for t in range(model.T, 0, -1):
        x = reverse_step(x, t, model, mode, step_rng)
    if clip is not None:
        x = np.clip(x, *clip)
    return x


@dataclass
class DdpmTrainResult:
    model: DdpmModel
    losses: list[float]


def train_ddpm(data, model: DdpmModel, epochs: int, batch: int, lr: float, rng: Rng,
               optimizer: str = "adam", lr_final: float | None = None) -> DdpmTrainResult:
    """Minimize E||eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t)||^2, t ~ U{1..T}.

    Loss is summed over dimensions and averaged over the batch, so a zero
    predictor scores ``dim``. ``optimizer`` is "adam" or "sgd" (momentum 0.9,
    clipped); the learning rate decays linearly to
    ``lr_final`` (default: lr) over training. Returns per-epoch mean losses.
    """
    x_all = np.asarray(data, dtype=np.float64)
    if x_all.ndim != 2 or x_all.shape[0] == 0 or x_all.shape[1] != model.dim:
        raise ValueError("data must be a non-empty (n, dim) array")
    n = len(x_all)
    sched = model.schedule
    sab = np.sqrt(sched.alpha_bar)
    s1ab = np.sqrt(1.0 - sched.alpha_bar)
    opt = Adam(lr) if optimizer == "adam" else Sgd(lr, momentum=0.9, clip=10.0)
    lr_final = lr if lr_final is None else lr_final
    n_steps = epochs * ((n + batch - 1) // batch)
    step = 0
    losses = []
    net = model.eps_net
    for epoch in range(epochs):
        er = rng.split(f"epoch{epoch}")
        order = er.permutation(n)
        tot = 0.0
        for lo in range(0, n, batch):
            x0 = x_all[order[lo:lo + batch]]
            m = len(x0)
            t = er.integers(1, sched.T + 1, size=m)
            eps = er.normal(x0.shape)
            xt = sab[t - 1, None] * x0 + s1ab[t - 1, None] * eps
            acts = forward_cached(net, model.net_input(xt, t))
            resid = acts[-1] - eps
            loss = float(np.sum(resid * resid) / m)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"loss not finite at epoch {epoch}; trace so far {losses}")
            opt.lr = lr + (lr_final - lr) * step / max(n_steps - 1, 1)
            opt.step(net, backward_cached(net, acts, 2.0 * resid / m))
            step += 1
            tot += loss * m
        losses.append(tot / n)
    model.trained = True
    return DdpmTrainResult(model, losses)


def save_checkpoint(model: DdpmModel, path) -> str:
    """Write a JSON parameter dump; returns its sha256."""
    text = json.dumps(model.to_dict(), sort_keys=True)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> DdpmModel:
    return DdpmModel.from_dict(json.loads(Path(path).read_text()))


def checkpoint_hash(model: DdpmModel) -> str:
    return hashlib.sha256(json.dumps(model.to_dict(), sort_keys=True).encode()).hexdigest()
