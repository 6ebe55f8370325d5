"""Dirichlet logistic Gaussian process estimator.

One grid LGP per robustness level supplies density mean/std fields; the
conservative pseudo-count ``max(N_l (p_E - lam * p_sigma), 0)`` plus a Dirichlet
prior gives the posterior parameter field, and ``lam`` is chosen by MAP under
a Gamma prior.

By default (``count_measure="density"``) the pseudo-count uses the density
values directly.  With ``"cell"`` the moments are multiplied by the cell
volume, so a pseudo-count is the expected number of level-l samples in the
cell.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from . import dirichlet
from .lgp import (
    Grid,
    HyperPrior,
    LgpPosterior,
    bin_counts,
    fit_latent,
    make_grid,
    posterior_from_latent,
)
from .numerics import make_rng, maximize_1d, pmap

__all__ = [
    "NonFinite",
    "EmptyLevel",
    "RobustnessLevels",
    "LambdaPrior",
    "DlgpConfig",
    "QueryResult",
    "FieldQuery",
    "DlgpModel",
    "classify",
    "fit_latents",
    "fit",
]

MODEL_SCHEMA = "riskscope.model/1"

# sub-stream ids for make_rng
STREAM_MOMENTS = 1

COUNT_MEASURES = ("cell", "density")


class NonFinite(ValueError):
    pass


class EmptyLevel(UserWarning):
    pass


@dataclass(frozen=True)
class RobustnessLevels:
    """Levels (-inf, b_1], (b_1, b_2], ..., (b_{m-1}, inf)."""

    boundaries: tuple

    def __post_init__(self):
        b = tuple(float(v) for v in self.boundaries)
        if any(not math.isfinite(v) for v in b):
            raise ValueError("level boundaries must be finite")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("level boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)

    @property
    def m(self) -> int:
        return len(self.boundaries) + 1

    @classmethod
    def parse(cls, text: str) -> "RobustnessLevels":
        text = text.strip()
        return cls(tuple(float(v) for v in text.split(",")) if text else ())

    def __str__(self):
        return ",".join(repr(b) for b in self.boundaries)

    def classify(self, rho):
        """0-based level index of each robustness value."""
        rho = np.asarray(rho, dtype=float)
        if not np.all(np.isfinite(rho)):
            raise NonFinite("robustness values must be finite")
        idx = np.searchsorted(np.asarray(self.boundaries), rho, side="left")
        return int(idx) if idx.ndim == 0 else idx


def classify(levels: RobustnessLevels, rho):
    return levels.classify(rho)


@dataclass(frozen=True)
class LambdaPrior:
    """Gamma(shape, scale) prior on the conservativeness parameter.

    The default shape 3, scale 1 has mode 2 and variance 3.
    """

    shape: float = 3.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.shape > 1:
            raise ValueError("shape must exceed 1 so the prior has an interior mode")

    @property
    def mode(self) -> float:
        return (self.shape - 1.0) * self.scale

    @property
    def variance(self) -> float:
        return self.shape * self.scale**2

    def logpdf(self, lam: float) -> float:
        if lam <= 0:
            return -math.inf
        k, s = self.shape, self.scale
        return (k - 1.0) * math.log(lam) - lam / s - gammaln(k) - k * math.log(s)


@dataclass(frozen=True)
class DlgpConfig:
    grid_width: float = 0.5
    hyper_prior: HyperPrior = field(default_factory=HyperPrior)
    lambda_prior: LambdaPrior = field(default_factory=LambdaPrior)
    alpha_prior: tuple | None = None  # default 1/m per level
    draws: int = 2000
    seed: int = 0
    lambda_max: float = 10.0
    # "opt" for the MAP value, or a fixed non-negative number
    lam: object = "opt"
    count_measure: str = "density"

    def __post_init__(self):
        if self.count_measure not in COUNT_MEASURES:
            raise ValueError(f"count_measure must be one of {COUNT_MEASURES}")


@dataclass(frozen=True)
class QueryResult:
    mean: np.ndarray
    cov: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    band: float


@dataclass(frozen=True)
class FieldQuery:
    """Query results for every grid cell: arrays with a leading cell axis."""

    mean: np.ndarray  # (K, m)
    cov: np.ndarray  # (K, m, m)
    lower: np.ndarray  # (K, m)
    upper: np.ndarray  # (K, m)
    band: np.ndarray  # (K,)

    def cell(self, i) -> QueryResult:
        return QueryResult(self.mean[i], self.cov[i], self.lower[i], self.upper[i],
                           float(self.band[i]))


def dirichlet_field_query(alpha, beta: float) -> FieldQuery:
    alpha = np.atleast_2d(alpha)
    lower, upper = dirichlet.credible_bounds(alpha, beta)
    band = np.clip((upper - lower).mean(axis=1), 0.0, 1.0)
    return FieldQuery(dirichlet.dir_mean(alpha), dirichlet.dir_cov(alpha), lower, upper, band)


@dataclass
class DlgpModel:
    grid: Grid
    levels: RobustnessLevels
    posteriors: list
    totals: np.ndarray
    alpha_prior: np.ndarray
    lam: float
    lam_opt: float | None = None
    seed: int = 0
    count_measure: str = "density"
    method: str = "dlgp"

    def __post_init__(self):
        if self.count_measure not in COUNT_MEASURES:
            raise ValueError(f"count_measure must be one of {COUNT_MEASURES}")
        self.totals = np.asarray(self.totals, dtype=float)
        self.alpha_prior = np.asarray(self.alpha_prior, dtype=float)
        self.p_mean = np.stack([p.p_mean for p in self.posteriors])  # (m, K) densities
        self.p_std = np.stack([p.p_std for p in self.posteriors])
        scale = self.grid.cell_volumes if self.count_measure == "cell" else np.ones(self.grid.n_cells)
        self._count_mean = self.totals[:, None] * self.p_mean * scale
        self._count_std = self.totals[:, None] * self.p_std * scale

    @property
    def m(self) -> int:
        return self.levels.m

    def with_lambda(self, lam: float) -> "DlgpModel":
        return replace(self, lam=float(lam))

    def pseudo_counts(self, lam: float | None = None, cells=None) -> np.ndarray:
        """Conservative pseudo-counts, shape (K, m) (or (len(cells), m))."""
        lam = self.lam if lam is None else lam
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        cm, cs = self._count_mean, self._count_std
        if cells is not None:
            cm, cs = cm[:, cells], cs[:, cells]
        return np.maximum(cm - lam * cs, 0.0).T

    def pseudo_count(self, x, lam: float, level: int) -> float:
        cell = self.grid.locate(x)
        return float(self.pseudo_counts(lam, cell)[0, level])

    def params_cells(self, lam: float | None = None, cells=None) -> np.ndarray:
        return self.pseudo_counts(lam, cells) + self.alpha_prior

    def posterior_params(self, x, lam: float | None = None) -> np.ndarray:
        return self.params_cells(lam, self.grid.locate(x))[0]

    def query(self, x, beta: float = 0.05) -> QueryResult:
        return dirichlet_field_query(self.posterior_params(x), beta).cell(0)

    def query_cells(self, beta: float = 0.05) -> FieldQuery:
        return dirichlet_field_query(self.params_cells(), beta)

    def lambda_objective(self, inputs, labels, lam: float,
                         prior: LambdaPrior = LambdaPrior()) -> float:
        return lambda_objective(self, inputs, labels, lam, prior)

    def to_dict(self, include_factor: bool = True) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "method": self.method,
            "levels": list(self.levels.boundaries),
            "grid": self.grid.to_dict(),
            "alpha_prior": self.alpha_prior.tolist(),
            "lambda": self.lam,
            "lambda_opt": self.lam_opt,
            "seed": self.seed,
            "count_measure": self.count_measure,
            "totals": self.totals.tolist(),
            "posteriors": [p.to_dict(include_factor) for p in self.posteriors],
        }

    @classmethod
    def from_dict(cls, d) -> "DlgpModel":
        if d.get("schema") != MODEL_SCHEMA or d.get("method") != "dlgp":
            raise ValueError("not a serialized DLGP model")
        return cls(
            grid=Grid.from_dict(d["grid"]),
            levels=RobustnessLevels(tuple(d["levels"])),
            posteriors=[LgpPosterior.from_dict(p) for p in d["posteriors"]],
            totals=np.asarray(d["totals"]),
            alpha_prior=np.asarray(d["alpha_prior"]),
            lam=float(d["lambda"]),
            lam_opt=None if d.get("lambda_opt") is None else float(d["lambda_opt"]),
            seed=int(d["seed"]),
            count_measure=d.get("count_measure", "density"),
        )


def lambda_objective(model: DlgpModel, inputs, labels, lam: float,
                     prior: LambdaPrior = LambdaPrior()) -> float:
    """Log posterior of ``lam``: sum of log Dirichlet-mean probabilities of the
    observed levels plus the log prior."""
    labels = np.asarray(labels, dtype=int)
    out = prior.logpdf(lam)
    if labels.size == 0 or not math.isfinite(out):
        return out
    cells = model.grid.locate(inputs)
    alpha = model.params_cells(lam, cells)
    probs = alpha[np.arange(labels.size), labels] / alpha.sum(axis=1)
    return float(np.sum(np.log(probs)) + out)


def fit_latents(grid: Grid, counts, config: DlgpConfig) -> list:
    """Deterministic per-level latent fits (hyper-parameters + Laplace)."""
    return pmap(lambda c: fit_latent(grid, c, config.hyper_prior), list(counts))


def fit(inputs, labels, levels: RobustnessLevels, region, config: DlgpConfig = DlgpConfig(),
        latents: list | None = None) -> DlgpModel:
    """Fit the estimator on labelled inputs (labels are 0-based level indices).

    Pass ``latents`` from :func:`fit_latents` to reuse the deterministic part
    of the fit across Monte Carlo seeds.
    """
    inputs = np.asarray(inputs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    m = levels.m
    grid = make_grid(region, config.grid_width)
    counts = bin_counts(grid, inputs, labels, m)
    totals = counts.totals
    for l in np.flatnonzero(totals == 0):
        warnings.warn(f"level {l} has no samples; its pseudo-counts are zero", EmptyLevel)
    if latents is None:
        latents = fit_latents(grid, counts.counts, config)
    posteriors = pmap(
        lambda l: posterior_from_latent(grid, latents[l], config.draws,
                                        make_rng(config.seed, STREAM_MOMENTS, l)),
        range(m),
    )
    alpha_prior = (np.full(m, 1.0 / m) if config.alpha_prior is None
                   else np.asarray(config.alpha_prior, dtype=float))
    if alpha_prior.shape != (m,) or np.any(alpha_prior < 0):
        raise ValueError("alpha_prior must hold m non-negative values")
    model = DlgpModel(grid, levels, posteriors, totals, alpha_prior, 0.0, seed=config.seed,
                      count_measure=config.count_measure)

    lam_opt = maximize_1d(
        lambda lam: lambda_objective(model, inputs, labels, lam, config.lambda_prior),
        0.0, config.lambda_max, tol=1e-8,
    )
    model.lam_opt = lam_opt
    model.lam = lam_opt if config.lam == "opt" else float(config.lam)
    return model
