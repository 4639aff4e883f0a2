"""Expectation-maximization for diagonal mixtures and the noise-smoothing fit experiment."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from findlab.mixture import (
    GaussianMixture,
    KlEstimate,
    component_log_densities,
    convolve_noise,
    density_grid,
    gmm_sample,
    grid_mse,
    kl_mc,
    logsumexp_rows,
)
from findlab.numerics import Rng


@dataclass(frozen=True)
class EmConfig:
    k: int = 2
    max_iters: int = 500
    tol: float = 1e-8
    var_floor: float = 1e-6
    init: str = "random-from-data"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tol <= 0 or self.var_floor <= 0:
            raise ValueError("tol and var_floor must be positive")
        if self.init not in ("random-from-data", "kmeans-style"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class FitResult:
    model: GaussianMixture
    log_likelihood_trace: list[float]
    iterations: int
    converged: bool
    reinits: int = 0


@dataclass(frozen=True)
class GridSpec:
    lo: float = -12.0
    hi: float = 12.0
    points: int = 1001


def _init_means(x: np.ndarray, k: int, how: str, rng: Rng) -> np.ndarray:
    n = len(x)
    if how == "random-from-data":
        return x[rng.choice(n, size=k, replace=False)].copy()
    # farthest-point seeding
    idx = [int(rng.integers(n))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx].copy()


def em_fit(samples, cfg: EmConfig, rng: Rng | None = None) -> FitResult:
    """Fit a k-component diagonal mixture by EM.

    The trace holds the mean per-sample log-likelihood before each M-step and
    once more for the returned model. A component whose responsibility mass
    vanishes is re-seeded on a random sample; the trace restarts when that happens.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, dim = x.shape
    if n < 10 * cfg.k:
        raise ValueError(f"need at least {10 * cfg.k} samples for k={cfg.k}, got {n}")
    rng = rng if rng is not None else Rng(cfg.seed)

    means = _init_means(x, cfg.k, cfg.init, rng)
    variances = np.maximum(np.tile(x.var(axis=0), (cfg.k, 1)), cfg.var_floor)
    weights = np.full(cfg.k, 1.0 / cfg.k)

    trace: list[float] = []
    reinits = 0
    converged = False
    it = 0
    while True:
        m = GaussianMixture.from_unnormalized(weights, means, variances)
        logp = component_log_densities(m, x)
        lse = logsumexp_rows(logp)
        ll = float(lse.mean())
        if not np.isfinite(ll):
            raise FloatingPointError("EM log-likelihood is not finite")
        if trace and ll - trace[-1] < cfg.tol:
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        if it >= cfg.max_iters:
            break
        it += 1

        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-10 * n
        safe = np.where(empty, 1.0, nk)
        weights = nk / n
        means = (resp.T @ x) / safe[:, None]
        sq = np.einsum("nk,nkd->kd", resp, (x[:, None, :] - means[None]) ** 2)
        variances = np.maximum(sq / safe[:, None], cfg.var_floor)
        if np.any(empty):
            for j in np.flatnonzero(empty):
                means[j] = x[rng.integers(n)]
                variances[j] = np.maximum(x.var(axis=0), cfg.var_floor)
                weights[j] = 1.0 / n
            reinits += int(empty.sum())
            trace = []
    return FitResult(m, trace, it, converged, reinits)


def fit_error_on_grid(target: GaussianMixture, cfg: EmConfig, n_samples: int,
                      grid: GridSpec = GridSpec(), rng: Rng | None = None,
                      return_fit: bool = False):
    """Grid-density MSE between ``target`` and an EM fit to n_samples draws from it."""
    if target.dim != 1:
        raise ValueError("grid fitting is one-dimensional")
    rng = rng if rng is not None else Rng(cfg.seed)
    x = gmm_sample(target, rng.split("draw"), n_samples)
    fit = em_fit(x, cfg, rng.split("init"))
    g_t = density_grid(target, grid.lo, grid.hi, grid.points)
    g_f = density_grid(fit.model, grid.lo, grid.hi, grid.points)
    mse = grid_mse(g_t, g_f)
    return (mse, fit, g_t, g_f) if return_fit else mse


DEFAULT_BASE = GaussianMixture(
    np.array([0.4, 0.35, 0.25]),
    np.array([[-3.0], [0.0], [4.0]]),
    np.array([[0.5], [0.7], [0.6]]),
)


@dataclass
class Fig3Result:
    mse_before: float
    mse_after: float
    pairs: list[tuple[float, float]]
    noise_var: float
    grids: dict = field(default_factory=dict)
    fits: list = field(default_factory=list)

    @property
    def drop_factor(self) -> float:
        return self.mse_before / self.mse_after

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "fig3_reps.csv"]
        with open(paths[0], "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["rep", "mse_before", "mse_after"])
            for i, (b, a) in enumerate(self.pairs):
                wr.writerow([i, repr(b), repr(a)])
        for leg in ("before", "after"):
            target, fit = self.grids[f"target_{leg}"], self.grids[f"fit_{leg}"]
            p = out / f"fig3_grid_{leg}.csv"
            with open(p, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["x", "target", "fit"])
                for row in zip(target.x, target.values, fit.values):
                    wr.writerow([repr(float(v)) for v in row])
            paths.append(p)
        return paths


def fig3_experiment(base: GaussianMixture = DEFAULT_BASE, noise_var: float = 1.5,
                    cfg: EmConfig = EmConfig(k=2), reps: int = 5, n_samples: int = 20000,
                    grid: GridSpec = GridSpec(), rng: Rng | None = None) -> Fig3Result:
    """Median grid-fit MSE of a K-component fit, before and after noise convolution.

    Grids of the median-rep leg (target and fit, before and after) are kept for plotting.
    """
    if base.dim != 1:
        raise ValueError("base must be one-dimensional")
    if noise_var < 0 or reps < 1:
        raise ValueError("need noise_var >= 0 and reps >= 1")
    rng = rng if rng is not None else Rng(cfg.seed)
    noisy = convolve_noise(base, noise_var)
    legs = []
    for r in range(reps):
        sub = rng.split(f"rep{r}")
        before = fit_error_on_grid(base, cfg, n_samples, grid, sub.split("before"), return_fit=True)
        after = fit_error_on_grid(noisy, cfg, n_samples, grid, sub.split("after"), return_fit=True)
        legs.append((before, after))
    pairs = [(b[0], a[0]) for b, a in legs]
    mse_b = float(np.median([p[0] for p in pairs]))
    mse_a = float(np.median([p[1] for p in pairs]))
    # representative rep: the one whose before-MSE is the median (lower middle for even reps)
    rep = int(np.argsort([p[0] for p in pairs])[(reps - 1) // 2])
    b, a = legs[rep]
    grids = {"target_before": b[2], "fit_before": b[3], "target_after": a[2], "fit_after": a[3]}
    fits = [(lb[1], la[1]) for lb, la in legs]
    return Fig3Result(mse_b, mse_a, pairs, float(noise_var), grids, fits)


def random_separated_base(rng: Rng, k: int = 3, var_range=(0.3, 1.0)) -> GaussianMixture:
    """Random 1-D k-component mixture with adjacent means at least 2*sqrt(max var) apart."""
    var = rng.uniform(*var_range, size=k)
    sep = 2.0 * np.sqrt(var.max())
    gaps = sep + rng.uniform(0.0, 2.0 * sep, size=k - 1)
    means = np.concatenate([[0.0], np.cumsum(gaps)])
    means -= means.mean()
    w = rng.uniform(0.2, 1.0, size=k)
    return GaussianMixture.from_unnormalized(w, means[:, None], var[:, None])


def best_of_restarts(samples, cfg: EmConfig, rng: Rng, restarts: int = 3) -> FitResult:
    """Highest final log-likelihood over ``restarts`` independent random inits."""
    fits = [em_fit(samples, cfg, rng.split(f"restart{i}")) for i in range(restarts)]
    return max(fits, key=lambda f: f.log_likelihood_trace[-1])


def sample_kl(samples, target: GaussianMixture, rng: Rng, k: int | None = None, n_mc: int = 100_000,
              restarts: int = 3) -> KlEstimate:
    """KL(fit || target), where ``fit`` is a k-component EM fit of ``samples`` (k defaults to target.k).

    Samples have no density of their own, so the fitted mixture stands in for them.
    """
    cfg = EmConfig(k=k or target.k)
    fit = best_of_restarts(samples, cfg, rng.split("fit"), restarts)
    return kl_mc(fit.model, target, rng.split("mc"), n_mc)
