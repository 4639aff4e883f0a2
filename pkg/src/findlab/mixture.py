"""Diagonal Gaussian mixtures: density, sampling, noise convolution, Fisher terms, KL."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from findlab.numerics import Rng

LOG_2PI = np.log(2.0 * np.pi)
# log-density floor used when a sample underflows the reference density
LOG_FLOOR = np.log(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture with per-component weight, mean and per-dimension variance.

    Arrays: ``weights`` (k,), ``means`` (k, dim), ``variances`` (k, dim).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if var.ndim == 1:
            var = var[:, None]
        if var.shape[1] == 1 and mu.shape[1] > 1:
            var = np.repeat(var, mu.shape[1], axis=1)
        if w.ndim != 1 or mu.shape[0] != w.size or var.shape != mu.shape:
            raise ValueError("weights, means and variances disagree on component count or dim")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("variances must be finite and strictly positive")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_unnormalized(cls, weights, means, variances) -> "GaussianMixture":
        """Renormalize raw positive weights before building (avoids sum-to-one drift)."""
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        # one correction pass keeps |sum - 1| at machine precision
        w[np.argmax(w)] += 1.0 - w.sum()
        return cls(w, means, variances)

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["variances"]))


@dataclass(frozen=True)
class DensityGrid:
    lo: float
    hi: float
    points: int
    values: np.ndarray

    def __post_init__(self):
        if self.points < 2 or not self.lo < self.hi:
            raise ValueError("grid needs points >= 2 and lo < hi")
        if len(self.values) != self.points or np.any(np.asarray(self.values) < 0):
            raise ValueError("grid values must be non-negative, one per point")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "value"])
            for xi, vi in zip(self.x, self.values):
                wr.writerow([repr(float(xi)), repr(float(vi))])

    @classmethod
    def from_csv(cls, path) -> "DensityGrid":
        rows = list(csv.DictReader(Path(path).open()))
        xs = np.array([float(r["x"]) for r in rows])
        return cls(float(xs[0]), float(xs[-1]), len(rows), np.array([float(r["value"]) for r in rows]))


def _check_dim(m: GaussianMixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xb = x.reshape(-1, m.dim) if x.ndim <= 1 and m.dim == 1 else np.atleast_2d(x)
    if xb.shape[-1] != m.dim:
        raise ValueError(f"point dim {xb.shape[-1]} does not match mixture dim {m.dim}")
    return xb


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Stable log(sum(exp(a), axis=1)) for a finite-max (n, k) array."""
    cols = np.ascontiguousarray(a.T)
    top = np.maximum.reduce(cols, axis=0)
    top = np.where(np.isfinite(top), top, 0.0)
    return top + np.log(np.add.reduce(np.exp(cols - top), axis=0))


def component_log_densities(m: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """(n, k) array of log w_i + log N(x; mu_i, var_i)."""
    diff = x[:, None, :] - m.means[None, :, :]
    quad = np.sum(diff * diff / m.variances[None], axis=2)
    logdet = np.sum(np.log(m.variances), axis=1)
    return np.log(m.weights)[None] - 0.5 * (quad + logdet[None] + m.dim * LOG_2PI)


def gmm_log_density(m: GaussianMixture, x) -> np.ndarray:
    """Log density at each row of ``x`` (a single 1-D point for dim 1 counts as a row each)."""
    return logsumexp_rows(component_log_densities(m, _check_dim(m, x)))


def gmm_density(m: GaussianMixture, x) -> float:
    """Mixture density at one point."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (m.dim,):
        raise ValueError(f"point has shape {x.shape}, mixture dim is {m.dim}")
    return float(np.exp(gmm_log_density(m, x[None])[0]))


def gmm_sample(m: GaussianMixture, rng: Rng, n: int, return_labels: bool = False):
    """Draw n points: categorical component choice, then a diagonal Gaussian draw."""
    if n <= 0:
        raise ValueError("n must be positive")
    comp = rng.choice(m.k, size=n, p=m.weights)
    x = m.means[comp] + np.sqrt(m.variances[comp]) * rng.normal((n, m.dim))
    return (x, comp) if return_labels else x


def convolve_noise(m: GaussianMixture, noise_var: float) -> GaussianMixture:
    """Mixture of P convolved with N(0, noise_var I): every variance grows by noise_var."""
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    return GaussianMixture(m.weights, m.means, m.variances + noise_var)


def fisher_info_per_component(m: GaussianMixture, noise_var: float) -> np.ndarray:
    """(k, dim) array of w_i / (var_i + noise_var)."""
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    return m.weights[:, None] / (m.variances + noise_var)


@dataclass(frozen=True)
class KlEstimate:
    estimate: float
    stderr: float
    n: int
    clamped: int


def kl_mc(p: GaussianMixture, q: GaussianMixture, rng: Rng, n: int) -> KlEstimate:
    """Monte-Carlo D_KL(p || q) from n draws of p, with its standard error.

    Samples where q underflows get a floored log-density and are counted in ``clamped``.
    """
    if p.dim != q.dim:
        raise ValueError("mixtures differ in dimension")
    if n < 1000:
        raise ValueError("need at least 1000 samples")
    x = gmm_sample(p, rng, n)
    lp = gmm_log_density(p, x)
    lq = gmm_log_density(q, x)
    bad = ~np.isfinite(lq)
    lq = np.where(bad, LOG_FLOOR, lq)
    terms = lp - lq
    return KlEstimate(float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(n)), n, int(bad.sum()))


def density_grid(m: GaussianMixture, lo: float, hi: float, points: int) -> DensityGrid:
    if m.dim != 1:
        raise ValueError("density grids are one-dimensional")
    if not lo < hi:
        raise ValueError("lo must be below hi")
    xs = np.linspace(lo, hi, points)
    return DensityGrid(float(lo), float(hi), int(points), np.exp(gmm_log_density(m, xs[:, None])))


def grid_mse(a: DensityGrid, b: DensityGrid) -> float:
    if (a.lo, a.hi, a.points) != (b.lo, b.hi, b.points):
        raise ValueError("grids do not share lo/hi/points")
    return float(np.mean((np.asarray(a.values) - np.asarray(b.values)) ** 2))


def total_variation(g: DensityGrid) -> float:
    """Sum of absolute successive differences of the grid values."""
    return float(np.sum(np.abs(np.diff(g.values))))


def trapezoid_integral(g: DensityGrid) -> float:
    return float(np.trapezoid(g.values, g.x))
