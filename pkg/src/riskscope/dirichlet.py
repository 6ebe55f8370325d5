"""Dirichlet moments, equal-tailed marginal credible bounds and sampling.

Functions accept a single parameter vector of shape (m,) or a stack of shape
(..., m); the last axis indexes levels.
"""

from __future__ import annotations

import warnings

import numpy as np

from .numerics import beta_quantile

__all__ = [
    "AllZero",
    "NonPositiveAlpha",
    "DegenerateMarginal",
    "dir_mean",
    "dir_cov",
    "marginal_credible",
    "credible_bounds",
    "dir_sample",
]


class AllZero(ValueError):
    pass


class NonPositiveAlpha(ValueError):
    pass


class DegenerateMarginal(UserWarning):
    pass


def _alpha(alpha):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
        raise ValueError("Dirichlet parameters must be finite and non-negative")
    total = alpha.sum(axis=-1)
    if np.any(total <= 0):
        raise AllZero("Dirichlet parameters sum to zero")
    return alpha, total


def dir_mean(alpha) -> np.ndarray:
    alpha, total = _alpha(alpha)
    return alpha / total[..., None]


def dir_cov(alpha) -> np.ndarray:
    """Covariance matrix (..., m, m) of a Dirichlet vector."""
    alpha, a0 = _alpha(alpha)
    mean = alpha / a0[..., None]
    outer = mean[..., :, None] * mean[..., None, :]
    diag = np.zeros_like(outer)
    idx = np.arange(alpha.shape[-1])
    diag[..., idx, idx] = mean
    return (diag - outer) / (a0[..., None, None] + 1.0)


def credible_bounds(alpha, beta: float = 0.05):
    """Equal-tailed (1 - beta) bounds for every marginal; returns (lower, upper).

    The marginal of level l is Beta(alpha_l, alpha_0 - alpha_l).  A zero
    component gives (0, 0) and a component holding all the mass gives (1, 1).
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    alpha, a0 = _alpha(alpha)
    rest = a0[..., None] - alpha
    lower = np.zeros(alpha.shape)
    upper = np.zeros(alpha.shape)
    full = (alpha > 0) & (rest <= 0)
    lower[full] = upper[full] = 1.0
    ok = (alpha > 0) & (rest > 0)
    if ok.any():
        a, b = alpha[ok], rest[ok]
        q = beta_quantile(np.concatenate([a, a]), np.concatenate([b, b]),
                          np.repeat([beta / 2.0, 1.0 - beta / 2.0], a.size))
        lower[ok] = q[: a.size]
        upper[ok] = q[a.size:]
    return lower, upper


def marginal_credible(alpha, level: int, beta: float = 0.05):
    """Bounds for one level; warns when the marginal is a point mass."""
    alpha = np.asarray(alpha, dtype=float)
    lower, upper = credible_bounds(alpha, beta)
    if alpha[level] == 0 or alpha[level] == alpha.sum():
        warnings.warn(f"level {level} marginal is a point mass", DegenerateMarginal)
    return float(lower[level]), float(upper[level])


def dir_sample(alpha, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws as normalised independent Gamma(alpha_l, 1) variables."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~(alpha > 0)):
        raise NonPositiveAlpha("every Dirichlet parameter must be positive to sample")
    g = rng.standard_gamma(alpha, size=(n, alpha.size))
    return g / g.sum(axis=1, keepdims=True)
