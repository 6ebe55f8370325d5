"""Numerical kernel: Cholesky with jitter, incomplete beta and its quantile,
bounded scalar maximisation and seeded multivariate normal sampling."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import gammaln

__all__ = [
    "NotPositiveDefinite",
    "InvalidParameter",
    "make_rng",
    "cholesky",
    "betainc",
    "beta_quantile",
    "maximize_1d",
    "mvn_sample",
    "max_workers",
    "pmap",
]

# Relative jitter levels (multiples of trace/n) tried in order.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class InvalidParameter(ValueError):
    pass


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for stream ``keys`` under ``seed``.

    Sub-streams come from ``SeedSequence(seed, spawn_key=keys)``, so a task
    identified by the same keys always sees the same numbers regardless of
    the order in which tasks are scheduled.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def _check_symmetric(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidParameter(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidParameter("matrix has non-finite entries")
    scale = max(np.max(np.abs(A)), 1e-300)
    if np.max(np.abs(A - A.T)) > 1e-12 * scale:
        raise InvalidParameter("matrix is not symmetric")
    return A


def cholesky(A, jitter: bool = True) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix.

    With ``jitter`` the diagonal is inflated by 0, 1e-10, 1e-8 and 1e-6 times
    trace/n in turn until the factorisation succeeds.
    """
    A = _check_symmetric(A)
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    ladder = JITTER_LADDER if jitter else (0.0,)
    base = max(np.trace(A) / n, 0.0)
    for rel in ladder:
        try:
            if rel == 0.0:
                return np.linalg.cholesky(A)
            if base == 0.0:
                break
            return np.linalg.cholesky(A + rel * base * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(f"matrix of size {n} is not positive definite")


def _betacf(a, b, x, max_iter=20000, eps=1e-16):
    # Modified Lentz evaluation of the continued fraction for I_x(a, b).
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < tiny, tiny, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        h = np.where(active, h * d * c, h)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) >= eps
        if not active.any():
            break
    return h


def betainc(a, b, x):
    """Regularised incomplete beta function I_x(a, b), vectorised."""
    a, b, x = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(x, dtype=float)
    )
    if np.any(a <= 0) or np.any(b <= 0):
        raise InvalidParameter("betainc requires a, b > 0")
    out = np.empty(x.shape)
    lo = x <= 0.0
    hi = x >= 1.0
    mid = ~(lo | hi)
    out[lo] = 0.0
    out[hi] = 1.0
    if mid.any():
        am, bm, xm = a[mid], b[mid], x[mid]
        log_front = (
            gammaln(am + bm) - gammaln(am) - gammaln(bm)
            + am * np.log(xm) + bm * np.log1p(-xm)
        )
        front = np.exp(log_front)
        direct = xm < (am + 1.0) / (am + bm + 2.0)
        res = np.empty(xm.shape)
        if direct.any():
            res[direct] = front[direct] * _betacf(am[direct], bm[direct], xm[direct]) / am[direct]
        flip = ~direct
        if flip.any():
            res[flip] = 1.0 - front[flip] * _betacf(bm[flip], am[flip], 1.0 - xm[flip]) / bm[flip]
        out[mid] = np.clip(res, 0.0, 1.0)
    return out if out.ndim else float(out)


def beta_quantile(a, b, p, max_iter: int = 200):
    """Inverse of ``betainc`` in x by bisection; accepts broadcastable arrays."""
    a, b, p = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(p, dtype=float)
    )
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise InvalidParameter("beta_quantile requires a, b > 0")
    if np.any(~((p > 0) & (p < 1))):
        raise InvalidParameter("beta_quantile requires 0 < p < 1")
    lo = np.zeros(p.shape)
    hi = np.ones(p.shape)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        moving = (mid > lo) & (mid < hi)
        if not moving.any():
            break
        below = np.asarray(betainc(a, b, mid)) < p
        lo = np.where(moving & below, mid, lo)
        hi = np.where(moving & ~below, mid, hi)
    out = 0.5 * (lo + hi)
    return out if out.ndim else float(out)


def maximize_1d(f, lo: float, hi: float, tol: float = 1e-8, n_grid: int = 200) -> float:
    """Maximise ``f`` on [lo, hi]: uniform grid scan, then golden section
    inside the bracket around the best grid point."""
    if not lo < hi:
        raise InvalidParameter("maximize_1d requires lo < hi")
    xs = np.linspace(lo, hi, n_grid)
    vals = np.array([f(x) for x in xs])
    k = int(np.argmax(vals))
    best_x, best_v = float(xs[k]), float(vals[k])
    a = float(xs[max(k - 1, 0)])
    b = float(xs[min(k + 1, n_grid - 1)])
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    for x, v in ((c, fc), (d, fd)):
        if v > best_v:
            best_x, best_v = float(x), float(v)
    return best_x


def mvn_sample(mean, cov, n: int, rng: np.random.Generator, chol=None) -> np.ndarray:
    """``n`` draws of N(mean, cov) as an (n, d) array.

    A precomputed lower factor ``chol`` may be passed to skip factorisation.
    """
    mean = np.asarray(mean, dtype=float)
    d = mean.shape[0]
    if chol is None:
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (d, d):
            raise InvalidParameter(f"mean has length {d} but cov has shape {cov.shape}")
        if not np.any(cov):
            return np.tile(mean, (n, 1))
        chol = cholesky(cov)
    z = rng.standard_normal((n, d))
    return mean + z @ chol.T


def max_workers() -> int:
    """Worker cap: ``RISKSCOPE_THREADS`` if set, else the CPU count."""
    env = os.environ.get("RISKSCOPE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def pmap(fn, items):
    """Order-preserving thread map capped by ``max_workers``."""
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
