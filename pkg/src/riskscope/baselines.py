"""Comparison estimators sharing the DLGP query interface.

* DKDE: pseudo-counts ``N_l * kde_l(x)`` from per-level Gaussian product-kernel
  KDEs with Scott's-rule bandwidths, plus a Dirichlet prior.
* GDP: Dirichlet-categorical classification by log-normal moment matching,
  one heteroscedastic GP regression per level, queried by pushing latent
  samples through exp-and-normalise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .dlgp import MODEL_SCHEMA, FieldQuery, QueryResult, RobustnessLevels, dirichlet_field_query
from .lgp import Grid, HyperPrior, KernelParams, kernel_matrix, make_grid
from .numerics import cholesky, make_rng, pmap

__all__ = [
    "DegenerateBandwidth",
    "scott_bandwidth",
    "kde_density",
    "KdeModel",
    "dkde_fit",
    "GdpModel",
    "gdp_targets",
    "gdp_fit",
]

SCOTT_FALLBACK = 1e-3

# sub-stream id for GDP pushforward samples
STREAM_GDP = 21


class DegenerateBandwidth(UserWarning):
    pass


def scott_bandwidth(points) -> np.ndarray:
    """Per-dimension ``n^(-1/(d+4)) * std``; zero spread falls back to 1e-3."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = points.shape
    if n < 1:
        raise ValueError("need at least one point")
    sd = points.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    h = n ** (-1.0 / (d + 4)) * sd
    if np.any(h <= 0):
        warnings.warn("zero sample spread; bandwidth set to 1e-3", DegenerateBandwidth)
        h = np.where(h > 0, h, SCOTT_FALLBACK)
    return h


def kde_density(points, x, bandwidth=None) -> np.ndarray:
    """Gaussian product-kernel density of ``points`` evaluated at ``x``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    h = scott_bandwidth(points) if bandwidth is None else np.asarray(bandwidth, dtype=float)
    n, d = points.shape
    norm = n * (2.0 * math.pi) ** (d / 2.0) * np.prod(h)
    out = np.empty(len(x))
    for s in range(0, len(x), 256):
        z = (x[s:s + 256, None, :] - points[None, :, :]) / h
        out[s:s + 256] = np.exp(-0.5 * np.sum(z * z, axis=-1)).sum(axis=1) / norm
    return float(out[0]) if single else out


def _envelope(method, grid, levels):
    return {"schema": MODEL_SCHEMA, "method": method, "levels": list(levels.boundaries),
            "grid": grid.to_dict()}


def _check_envelope(d, method):
    if d.get("schema") != MODEL_SCHEMA or d.get("method") != method:
        raise ValueError(f"not a serialized {method} model")


@dataclass
class KdeModel:
    grid: Grid
    levels: RobustnessLevels
    samples: list  # per level, (N_l, d)
    bandwidths: list  # per level, (d,) or None for empty levels
    alpha_prior: np.ndarray
    method: str = "dkde"

    def __post_init__(self):
        d = self.grid.ndim
        self.samples = [np.asarray(s, dtype=float).reshape(-1, d) for s in self.samples]
        self.bandwidths = [None if b is None else np.asarray(b, dtype=float) for b in self.bandwidths]
        self.alpha_prior = np.asarray(self.alpha_prior, dtype=float)
        self.totals = np.array([len(s) for s in self.samples], dtype=float)

    @property
    def m(self) -> int:
        return self.levels.m

    def pseudo_counts_at(self, x) -> np.ndarray:
        """``N_l * kde_l(x)`` for points ``x``, shape (n, m)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((len(x), self.m))
        for l, (s, h) in enumerate(zip(self.samples, self.bandwidths)):
            if len(s):
                out[:, l] = len(s) * kde_density(s, x, h)
        return out

    def pseudo_counts(self, cells=None) -> np.ndarray:
        centers = self.grid.centers if cells is None else self.grid.centers[np.atleast_1d(cells)]
        return self.pseudo_counts_at(centers)

    def params_cells(self, cells=None) -> np.ndarray:
        return self.pseudo_counts(cells) + self.alpha_prior

    def posterior_params(self, x) -> np.ndarray:
        return self.pseudo_counts_at(x)[0] + self.alpha_prior

    def query(self, x, beta: float = 0.05) -> QueryResult:
        return dirichlet_field_query(self.posterior_params(x), beta).cell(0)

    def query_cells(self, beta: float = 0.05) -> FieldQuery:
        return dirichlet_field_query(self.params_cells(), beta)

    def to_dict(self) -> dict:
        d = _envelope(self.method, self.grid, self.levels)
        d.update(alpha_prior=self.alpha_prior.tolist(),
                 samples=[s.tolist() for s in self.samples],
                 bandwidths=[None if b is None else b.tolist() for b in self.bandwidths])
        return d

    @classmethod
    def from_dict(cls, d) -> "KdeModel":
        _check_envelope(d, "dkde")
        return cls(Grid.from_dict(d["grid"]), RobustnessLevels(tuple(d["levels"])),
                   d["samples"], d["bandwidths"], np.asarray(d["alpha_prior"]))


def _alpha_prior(alpha_prior, m):
    a = np.full(m, 1.0 / m) if alpha_prior is None else np.asarray(alpha_prior, dtype=float)
    if a.shape != (m,) or np.any(a < 0):
        raise ValueError("alpha_prior must hold m non-negative values")
    return a


def dkde_fit(inputs, labels, levels: RobustnessLevels, region, alpha_prior=None,
             grid_width: float = 0.5) -> KdeModel:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    labels = np.asarray(labels, dtype=int)
    grid = make_grid(region, grid_width)
    samples = [inputs[labels == l] for l in range(levels.m)]
    bws = [scott_bandwidth(s) if len(s) else None for s in samples]
    return KdeModel(grid, levels, samples, bws, _alpha_prior(alpha_prior, levels.m))


# --- GDP --------------------------------------------------------------------


def gdp_targets(labels, m: int, alpha_eps: float = 0.01):
    """Log-normal moment matching of smoothed one-hot counts.

    Returns (targets, noise), each (m, N): ``v = log(1/a + 1)`` and
    ``y = log a - v/2`` with ``a = onehot + alpha_eps``.
    """
    if not alpha_eps > 0:
        raise ValueError("alpha_eps must be positive")
    labels = np.asarray(labels, dtype=int)
    a = np.full((m, labels.size), alpha_eps)
    a[labels, np.arange(labels.size)] += 1.0
    v = np.log1p(1.0 / a)
    return np.log(a) - 0.5 * v, v


def _gp_log_evidence(K, y, noise):
    n = y.size
    try:
        L = cholesky(K + np.diag(noise))
    except np.linalg.LinAlgError:
        return -math.inf, None
    alpha = cho_solve((L, True), y)
    val = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
    return float(val), L


def _gp_select(X, y, noise, prior: HyperPrior):
    """Grid search of the log marginal likelihood over the hyper-parameter box."""
    sq = np.maximum(np.sum(X**2, 1)[:, None] + np.sum(X**2, 1)[None, :] - 2 * X @ X.T, 0.0)
    vals = np.geomspace(prior.bounds[0], prior.bounds[1], prior.n_grid)
    best = (-math.inf, None)
    for t2 in vals:
        base = np.exp(-t2 * sq)
        for t1 in vals:
            ev, _ = _gp_log_evidence(t1 * base, y, noise)
            if ev > best[0]:
                best = (ev, KernelParams(float(t1), float(t2)))
    return best[1]


@dataclass
class GdpModel:
    grid: Grid
    levels: RobustnessLevels
    inputs: np.ndarray  # (N, d)
    targets: np.ndarray  # (m, N)
    noise: np.ndarray  # (m, N)
    params: list  # per level KernelParams
    alpha_eps: float = 0.01
    draws: int = 2000
    seed: int = 0
    method: str = "gdp"
    _factors: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float)
        self.noise = np.asarray(self.noise, dtype=float)
        if np.any(~(self.noise > 0)):
            raise ValueError("noise variances must be positive")
        self._factors = []
        for l in range(self.m):
            L = cholesky(kernel_matrix(self.inputs, self.params[l]) + np.diag(self.noise[l]))
            self._factors.append((L, cho_solve((L, True), self.targets[l])))

    @property
    def m(self) -> int:
        return self.levels.m

    def latent_moments(self, x):
        """Posterior mean and variance of every level's latent at ``x``: (n, m) each."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mean = np.empty((len(x), self.m))
        var = np.empty((len(x), self.m))
        for l, (L, alpha) in enumerate(self._factors):
            Ks = kernel_matrix(self.inputs, self.params[l], x)
            mean[:, l] = Ks.T @ alpha
            V = solve_triangular(L, Ks, lower=True)
            var[:, l] = np.maximum(self.params[l].amplitude - np.sum(V * V, axis=0), 0.0)
        return mean, var

    def _pushforward(self, x, beta: float, rng) -> FieldQuery:
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        mean, var = self.latent_moments(x)
        f = mean + np.sqrt(var) * rng.standard_normal((self.draws,) + mean.shape)
        f -= f.max(axis=-1, keepdims=True)
        p = np.exp(f)
        p /= p.sum(axis=-1, keepdims=True)  # (S, n, m)
        pm = p.mean(axis=0)
        dev = p - pm
        cov = np.einsum("sna,snb->nab", dev, dev) / (self.draws - 1)
        lower, upper = np.quantile(p, [beta / 2.0, 1.0 - beta / 2.0], axis=0)
        # empirical quantiles of a very skewed marginal can exclude the sample mean
        lower = np.minimum(lower, pm)
        upper = np.maximum(upper, pm)
        band = np.clip((upper - lower).mean(axis=1), 0.0, 1.0)
        return FieldQuery(pm, cov, lower, upper, band)

    def query(self, x, beta: float = 0.05) -> QueryResult:
        rng = make_rng(self.seed, STREAM_GDP, 1)
        return self._pushforward(np.asarray(x, dtype=float)[None], beta, rng).cell(0)

    def query_cells(self, beta: float = 0.05) -> FieldQuery:
        return self._pushforward(self.grid.centers, beta, make_rng(self.seed, STREAM_GDP, 0))

    def to_dict(self) -> dict:
        d = _envelope(self.method, self.grid, self.levels)
        d.update(alpha_eps=self.alpha_eps, draws=self.draws, seed=self.seed,
                 inputs=self.inputs.tolist(), targets=self.targets.tolist(),
                 noise=self.noise.tolist(),
                 params=[[p.amplitude, p.inv_lengthscale] for p in self.params])
        return d

    @classmethod
    def from_dict(cls, d) -> "GdpModel":
        _check_envelope(d, "gdp")
        return cls(Grid.from_dict(d["grid"]), RobustnessLevels(tuple(d["levels"])),
                   np.asarray(d["inputs"]), np.asarray(d["targets"]), np.asarray(d["noise"]),
                   [KernelParams(*p) for p in d["params"]], float(d["alpha_eps"]),
                   int(d["draws"]), int(d["seed"]))


def gdp_fit(inputs, labels, levels: RobustnessLevels, region, alpha_eps: float = 0.01,
            grid_width: float = 0.5, draws: int = 2000, seed: int = 0,
            prior: HyperPrior = HyperPrior()) -> GdpModel:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("GDP needs at least one labelled input")
    grid = make_grid(region, grid_width)
    y, v = gdp_targets(labels, levels.m, alpha_eps)
    params = pmap(lambda l: _gp_select(inputs, y[l], v[l], prior), range(levels.m))
    return GdpModel(grid, levels, inputs, y, v, params, alpha_eps, draws, seed)
