"""Dense MLP, SGD and seeded random streams on plain numpy (float64 throughout)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class TrainingDivergence(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def _tag_word(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


class Rng:
    """Splittable seeded generator.

    ``split(tag)`` derives a child stream from the seed and the tag path only,
    so substreams do not depend on how many draws the parent has made.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_tag_word(t) for t in self.path]
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def split(self, tag: str) -> "Rng":
        return Rng(self.seed, self.path + (str(tag),))

    @property
    def name(self) -> str:
        return "/".join((str(self.seed),) + self.path)

    def normal(self, size) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size=None, replace=True, p=None):
        return self.gen.choice(n, size=size, replace=replace, p=p)

    def __repr__(self):
        return f"Rng({self.name!r})"


def gauss_sample(rng: Rng, n: int) -> np.ndarray:
    """n i.i.d. standard-normal draws."""
    if n <= 0:
        raise ValueError("n must be positive")
    return rng.normal(n)


@dataclass
class Mlp:
    """Feed-forward network; ``layers`` holds ``(W, b)`` with ``W`` of shape (out, in).

    The activation is applied between layers, never after the last one.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"
    output_kind: str = "vector"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_kind not in ("vector", "scalar-logit"):
            raise ValueError(f"unknown output kind {self.output_kind!r}")
        for (w1, _), (w2, _) in zip(self.layers, self.layers[1:]):
            if w1.shape[0] != w2.shape[1]:
                raise ValueError("layer dimensions do not chain")
        for w, b in self.layers:
            if b.shape != (w.shape[0],):
                raise ValueError("bias shape does not match weight rows")
        if self.output_kind == "scalar-logit" and self.out_dim != 1:
            raise ValueError("scalar-logit model must have one output")

    @classmethod
    def init(cls, sizes, rng: Rng, activation="tanh", output_kind="vector") -> "Mlp":
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal((fan_out, fan_in)) / np.sqrt(fan_in)
            layers.append((w, np.zeros(fan_out)))
        return cls(layers, activation, output_kind)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "Mlp":
        return Mlp([(w.copy(), b.copy()) for w, b in self.layers],
                   self.activation, self.output_kind, dict(self.meta))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for w, b in self.layers:
            w[...] = theta[i:i + w.size].reshape(w.shape)
            i += w.size
            b[...] = theta[i:i + b.size]
            i += b.size

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "output_kind": self.output_kind,
            "layers": [{"W": w.tolist(), "b": b.tolist()} for w, b in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        layers = [(np.asarray(l["W"], dtype=np.float64).reshape(len(l["b"]), -1),
                   np.asarray(l["b"], dtype=np.float64)) for l in d["layers"]]
        return cls(layers, d["activation"], d["output_kind"])

    def __call__(self, x):
        return mlp_forward(self, x)


def _act(kind, z):
    return np.tanh(z) if kind == "tanh" else z


def _act_grad(kind, a):
    # derivative expressed through the activation output
    return 1.0 - a * a if kind == "tanh" else np.ones_like(a)


def _as_batch(model: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.in_dim:
        raise ValueError(f"input has shape {x.shape}, model expects {model.in_dim} features")
    return xb, single


def forward_cached(model: Mlp, x: np.ndarray) -> list[np.ndarray]:
    """Forward pass on a (n, in) batch; returns every layer's output, input first."""
    acts = [x]
    last = len(model.layers) - 1
    for k, (w, b) in enumerate(model.layers):
        z = acts[-1] @ w.T + b
        acts.append(z if k == last else _act(model.activation, z))
    return acts


def backward_cached(model: Mlp, acts: list[np.ndarray], grad_out: np.ndarray):
    """Parameter gradients summed over the batch, given cached activations."""
    grads = [None] * len(model.layers)
    delta = grad_out
    for k in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[k]
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ w) * _act_grad(model.activation, acts[k])
    return grads


def mlp_forward(model: Mlp, x) -> np.ndarray:
    """Evaluate the network on one vector (returns a vector) or a batch of rows."""
    xb, single = _as_batch(model, x)
    out = forward_cached(model, xb)[-1]
    return out[0] if single else out


def mlp_backward(model: Mlp, x, grad_out):
    """d(loss)/d(theta) for a loss whose gradient w.r.t. the output is ``grad_out``.

    Works for a single vector or a batch; batch gradients are summed.
    """
    xb, single = _as_batch(model, x)
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], model.out_dim):
        raise ValueError(f"grad_out has shape {np.shape(grad_out)}, expected output dim {model.out_dim}")
    return backward_cached(model, forward_cached(model, xb), g)


def _check_grads(model: Mlp, grads) -> None:
    if len(grads) != len(model.layers):
        raise ValueError("gradient list does not match model layers")
    for (w, b), (gw, gb) in zip(model.layers, grads):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError("gradient shape does not match parameters")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise TrainingDivergence("non-finite gradient")


def sgd_step(model: Mlp, grads, lr: float) -> Mlp:
    """In-place ``theta -= lr * grad``; returns the same model."""
    _check_grads(model, grads)
    if lr == 0:
        return model
    for (w, b), (gw, gb) in zip(model.layers, grads):
        w -= lr * gw
        b -= lr * gb
    return model


class Sgd:
    """SGD with optional heavy-ball momentum; momentum=0 reduces to :func:`sgd_step`."""

    def __init__(self, lr: float, momentum: float = 0.0, clip: float | None = None):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self._vel = None

    def step(self, model: Mlp, grads) -> Mlp:
        _check_grads(model, grads)
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(gw * gw) + np.sum(gb * gb)) for gw, gb in grads))
            if norm > self.clip:
                grads = [(gw * (self.clip / norm), gb * (self.clip / norm)) for gw, gb in grads]
        if self.momentum == 0.0:
            return sgd_step(model, grads, self.lr)
        if self._vel is None:
            self._vel = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]
        for (w, b), (vw, vb), (gw, gb) in zip(model.layers, self._vel, grads):
            vw *= self.momentum
            vw += gw
            vb *= self.momentum
            vb += gb
            w -= self.lr * vw
            b -= self.lr * vb
        return model


class Adam:
    """Adam with bias correction; same ``step(model, grads)`` surface as :class:`Sgd`."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = None
        self._v = None

    def step(self, model: Mlp, grads) -> Mlp:
        _check_grads(model, grads)
        if self._m is None:
            self._m = [np.zeros_like(p) for w, b in model.layers for p in (w, b)]
            self._v = [np.zeros_like(p) for w, b in model.layers for p in (w, b)]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        params = [p for w, b in model.layers for p in (w, b)]
        flat_g = [g for gw, gb in grads for g in (gw, gb)]
        for p, g, m, v in zip(params, flat_g, self._m, self._v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return model
