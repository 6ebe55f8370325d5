"""Grid-discretised logistic Gaussian process density estimation.

The input box is cut into equal cells; a zero-mean GP latent field ``f`` on the
cell centres induces the cell probabilities ``softmax(f)``.  Each level's
posterior over ``f`` is approximated by Laplace's method (or sampled with a
random-walk Metropolis chain), and the induced density field is summarised by
its per-cell Monte Carlo mean and standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from .numerics import NotPositiveDefinite, cholesky, make_rng, mvn_sample

__all__ = [
    "TooManyCells",
    "OutOfRegion",
    "NoConvergence",
    "Grid",
    "CellCounts",
    "KernelParams",
    "HyperPrior",
    "LaplaceResult",
    "LgpPosterior",
    "make_grid",
    "bin_counts",
    "kernel_matrix",
    "log_likelihood",
    "laplace_fit",
    "hyper_objective",
    "hyper_map",
    "density_moments",
    "metropolis_sample",
    "LatentFit",
    "fit_latent",
    "posterior_from_latent",
    "fit_level",
]

SCHEMA = "riskscope.lgp/1"


class TooManyCells(ValueError):
    pass


class OutOfRegion(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    lower: tuple
    upper: tuple
    width: float
    shape: tuple

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_area(self) -> float:
        return self.width ** self.ndim

    @property
    def cell_volumes(self) -> np.ndarray:
        """Per-cell volume; cells on the upper edge are clipped to the box."""
        vols = np.ones(self.n_cells)
        edges = []
        for k in range(self.ndim):
            lo = self.lower[k] + self.width * np.arange(self.shape[k])
            hi = np.minimum(lo + self.width, self.upper[k])
            edges.append(hi - lo)
        mesh = np.meshgrid(*edges, indexing="ij")
        for m in mesh:
            vols = vols * m.ravel()
        return vols

    @property
    def centers(self) -> np.ndarray:
        axes = []
        for k in range(self.ndim):
            lo = self.lower[k] + self.width * np.arange(self.shape[k])
            hi = np.minimum(lo + self.width, self.upper[k])
            axes.append(0.5 * (lo + hi))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def region_volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def locate(self, x) -> np.ndarray:
        """Cell index of each point; points on a shared face go to the lower cell."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.ndim:
            raise ValueError(f"points must have {self.ndim} coordinates")
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        tol = 1e-9 * np.maximum(1.0, hi - lo)
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            raise OutOfRegion("point outside the grid region")
        idx = np.ceil((x - lo) / self.width).astype(int) - 1
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "width": self.width}

    @classmethod
    def from_dict(cls, d) -> "Grid":
        return make_grid(list(zip(d["lower"], d["upper"])), d["width"])


def make_grid(region, width: float, max_cells: int = 100_000) -> Grid:
    """Grid of cells with edge ``width`` over the box ``region = [(lo, hi), ...]``."""
    if not width > 0:
        raise ValueError("grid width must be positive")
    lower = tuple(float(lo) for lo, _ in region)
    upper = tuple(float(hi) for _, hi in region)
    if any(hi <= lo for lo, hi in zip(lower, upper)):
        raise ValueError("region must have positive extent in every dimension")
    shape = tuple(
        max(1, math.ceil((hi - lo) / width - 1e-9)) for lo, hi in zip(lower, upper)
    )
    n = int(np.prod(shape))
    if n > max_cells:
        raise TooManyCells(f"{n} cells exceeds the cap of {max_cells}")
    return Grid(lower, upper, float(width), shape)


@dataclass(frozen=True)
class CellCounts:
    counts: np.ndarray  # (m, n_cells) integer counts

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def bin_counts(grid: Grid, inputs, labels, m: int) -> CellCounts:
    inputs = np.asarray(inputs, dtype=float).reshape(-1, grid.ndim)
    labels = np.asarray(labels, dtype=int)
    counts = np.zeros((m, grid.n_cells), dtype=np.int64)
    if len(inputs):
        cells = grid.locate(inputs)
        np.add.at(counts, (labels, cells), 1)
    return CellCounts(counts)


@dataclass(frozen=True)
class KernelParams:
    amplitude: float
    inv_lengthscale: float

    def __post_init__(self):
        if not (np.isfinite(self.amplitude) and self.amplitude > 0):
            raise ValueError("amplitude must be positive and finite")
        if not (np.isfinite(self.inv_lengthscale) and self.inv_lengthscale > 0):
            raise ValueError("inv_lengthscale must be positive and finite")


def kernel_matrix(X, params: KernelParams, X2=None) -> np.ndarray:
    """Squared-exponential kernel theta1 * exp(-theta2 * |x - x'|^2)."""
    X = np.asarray(X, dtype=float)
    X2 = X if X2 is None else np.asarray(X2, dtype=float)
    sq = (
        np.sum(X**2, axis=1)[:, None]
        + np.sum(X2**2, axis=1)[None, :]
        - 2.0 * X @ X2.T
    )
    np.maximum(sq, 0.0, out=sq)
    return params.amplitude * np.exp(-params.inv_lengthscale * sq)


@dataclass(frozen=True)
class HyperPrior:
    """Independent half-normal priors on amplitude and inverse length-scale,
    searched on a log-spaced box."""

    amplitude_scale: float = 1.0
    inv_lengthscale_scale: float = 1.0
    bounds: tuple = (1e-2, 1e2)
    n_grid: int = 15

    def logpdf(self, params: KernelParams) -> float:
        out = 0.0
        for v, s in ((params.amplitude, self.amplitude_scale),
                     (params.inv_lengthscale, self.inv_lengthscale_scale)):
            out += 0.5 * math.log(2.0 / math.pi) - math.log(s) - 0.5 * (v / s) ** 2
        return out


def log_likelihood(counts, f, log_volumes=None):
    """Multinomial log-likelihood of cell counts under softmax(f), and its gradient.

    ``log_volumes`` adds per-cell offsets for clipped edge cells; with equal
    cells it is a constant and drops out.
    """
    counts = np.asarray(counts, dtype=float)
    f = np.asarray(f, dtype=float)
    if counts.shape != f.shape:
        raise ValueError("counts and f must have the same shape")
    eta = f if log_volumes is None else f + log_volumes
    n = counts.sum()
    if n == 0:
        return 0.0, np.zeros_like(f)
    lse = logsumexp(eta)
    value = float(counts @ eta - n * lse)
    grad = counts - n * np.exp(eta - lse)
    return value, grad


def _log_offsets(grid: Grid):
    vols = grid.cell_volumes
    if np.allclose(vols, vols[0]):
        return None
    return np.log(vols / vols.max())


def _chol_spd(B):
    # B = I + R^T K R is SPD with eigenvalues >= 1; skip the generic checks
    try:
        return np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        return cholesky(0.5 * (B + B.T))


@dataclass
class LaplaceResult:
    f_hat: np.ndarray
    a: np.ndarray
    cov: np.ndarray
    log_marginal: float
    grad_norm: float
    n_iter: int
    objective_trace: list = field(default_factory=list)


class _WFactor:
    """W = n (diag(p) - p p^T) = R R^T with R = sqrt(n) (diag(sqrt p) - p sqrt(p)^T).

    Products with R are O(k^2) thanks to the diagonal-plus-rank-one form.
    """

    def __init__(self, p, n):
        self.p = p
        self.s = np.sqrt(p)
        self.c = math.sqrt(n)

    def Rt_K(self, K):
        return self.c * (self.s[:, None] * K - np.outer(self.s, K @ self.p))

    def right_R(self, M):
        # M @ R
        return self.c * (M * self.s[None, :] - np.outer(M @ self.p, self.s))

    def R_vec(self, v):
        return self.c * (self.s * v - self.p * (self.s @ v))


def laplace_fit(grid: Grid, counts, params: KernelParams, K=None, max_iter: int = 100,
                tol: float = 1e-7, with_cov: bool = True, a0=None) -> LaplaceResult:
    """Gaussian approximation to p(f | counts, params) at its mode.

    Newton's method runs in the ``a = K^{-1} f`` parametrisation so ``K`` is
    never inverted; each step solves with ``B = I + R^T K R`` (W = R R^T),
    which has eigenvalues >= 1.
    """
    counts = np.asarray(counts, dtype=float)
    if K is None:
        K = kernel_matrix(grid.centers, params)
    lv = _log_offsets(grid)
    n = counts.sum()
    k = K.shape[0]

    def psi(a):
        f = K @ a
        ll, g = log_likelihood(counts, f, lv)
        return ll - 0.5 * a @ f, f, g

    a = np.zeros(k)
    obj, f, g = psi(a)
    if a0 is not None:
        warm = psi(a0)
        if warm[0] > obj:
            a = np.array(a0, dtype=float)
            obj, f, g = warm
    trace = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        grad = g - a
        if np.linalg.norm(grad) < tol:
            break
        p = softmax(f if lv is None else f + lv)
        W = _WFactor(p, n)
        RtK = W.Rt_K(K)
        B = W.right_R(RtK)
        B[np.diag_indices(k)] += 1.0
        LB = _chol_spd(B)
        b = n * (p * f - p * (p @ f)) + g  # W f + g
        a_new = b - W.R_vec(cho_solve((LB, True), RtK @ b))
        step = a_new - a
        s = 1.0
        for _ in range(40):
            cand, fc, gc = psi(a + s * step)
            if cand >= obj:
                break
            s *= 0.5
        else:
            break
        a, obj, f, g = a + s * step, cand, fc, gc
        trace.append(obj)
    grad_norm = float(np.linalg.norm(g - a))
    if grad_norm >= 1e-6 * max(1.0, n):
        raise NoConvergence(f"Laplace mode not found: gradient norm {grad_norm:.3g}")

    p = softmax(f if lv is None else f + lv)
    W = _WFactor(p, n)
    RtK = W.Rt_K(K)
    B = W.right_R(RtK)
    B[np.diag_indices(k)] += 1.0
    LB = _chol_spd(B)
    log_marginal = obj - float(np.sum(np.log(np.diag(LB))))
    cov = None
    if with_cov:
        V = solve_triangular(LB, RtK, lower=True)
        cov = K - V.T @ V
        cov = 0.5 * (cov + cov.T)
    return LaplaceResult(f, a, cov, log_marginal, grad_norm, it, trace)


def hyper_objective(grid: Grid, counts, params: KernelParams, prior: HyperPrior,
                    sqdist=None, a0=None, return_a: bool = False):
    """Laplace log marginal likelihood plus log hyper-prior density."""
    if sqdist is None:
        c = grid.centers
        sqdist = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    K = params.amplitude * np.exp(-params.inv_lengthscale * sqdist)
    res = laplace_fit(grid, counts, params, K=K, with_cov=False, a0=a0)
    value = res.log_marginal + prior.logpdf(params)
    return (value, res.a) if return_a else value


def hyper_map(grid: Grid, counts, prior: HyperPrior = HyperPrior(), refine: bool = True):
    """MAP kernel parameters: log-spaced grid search then Nelder-Mead in log space.

    With no data the likelihood term is zero, so the result is the corner of
    the search box closest to the half-normal mode, (lo, lo).
    Returns ``(params, objective)``.
    """
    c = grid.centers
    sqdist = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    lo, hi = prior.bounds
    values = np.geomspace(lo, hi, prior.n_grid)

    warm = {}

    def obj(t1, t2, a0=None):
        try:
            v, a = hyper_objective(grid, counts, KernelParams(t1, t2), prior, sqdist,
                                   a0=a0, return_a=True)
        except (NoConvergence, NotPositiveDefinite):
            return -np.inf
        warm["a"] = a
        return v

    best = (-np.inf, None)
    for t1 in values:
        warm.pop("a", None)
        for t2 in values:
            # the mode's a = grad log-lik(f_hat) moves slowly with theta
            v = obj(t1, t2, warm.get("a"))
            if v > best[0]:
                best = (v, (t1, t2))
    if best[1] is None:
        mode = (lo, lo)
        return KernelParams(*mode), obj(*mode)

    best_val, (t1, t2) = best
    if refine:
        llo, lhi = math.log(lo), math.log(hi)

        def neg(z):
            z = np.clip(z, llo, lhi)
            v = obj(math.exp(z[0]), math.exp(z[1]))
            return -v if np.isfinite(v) else 1e300

        res = minimize(neg, np.log([t1, t2]), method="Nelder-Mead",
                       options={"xatol": 1e-3, "fatol": 1e-6, "maxiter": 60})
        z = np.clip(res.x, llo, lhi)
        v = -neg(z)
        if v > best_val:
            best_val, (t1, t2) = v, (math.exp(z[0]), math.exp(z[1]))
    return KernelParams(float(t1), float(t2)), float(best_val)


def density_moments(f_mean, cov, grid: Grid, draws: int, rng, chol=None):
    """Per-cell mean and standard deviation of the density exp(f_i) / sum_k exp(f_k) v_k
    under f ~ N(f_mean, cov)."""
    if draws < 2:
        raise ValueError("need at least two draws")
    fs = mvn_sample(f_mean, cov, draws, rng, chol=chol)
    vols = grid.cell_volumes
    lv = np.log(vols)
    dens = softmax(fs + lv, axis=1) / vols
    return dens.mean(axis=0), dens.std(axis=0, ddof=1)


def metropolis_sample(grid: Grid, counts, params: KernelParams, n_steps: int, rng,
                      step: float | None = None, thin: int = 1, f0=None):
    """Random-walk Metropolis on the exact latent posterior.

    Proposals are ``f + step * L z`` with ``L`` the prior Cholesky factor, so
    the chain works in whitened coordinates.  Returns ``(samples, accept_rate)``.
    """
    counts = np.asarray(counts, dtype=float)
    K = kernel_matrix(grid.centers, params)
    L = cholesky(K)
    lv = _log_offsets(grid)
    k = K.shape[0]
    if step is None:
        step = 2.38 / math.sqrt(k) / math.sqrt(1.0 + counts.sum() / k)
    # whitened v with f = L v, prior v ~ N(0, I)
    v = np.zeros(k) if f0 is None else solve_triangular(L, f0, lower=True)

    n = counts.sum()
    off = np.zeros(k) if lv is None else lv

    def logp(v):
        f = L @ v
        g = f + off
        mx = g.max()
        return float(counts @ f - n * (mx + math.log(np.exp(g - mx).sum())) - 0.5 * (v @ v))

    cur = logp(v)
    out = np.empty((n_steps // thin, k))
    accepted = 0
    chunk = 8192
    for start in range(0, n_steps, chunk):
        size = min(chunk, n_steps - start)
        z = rng.standard_normal((size, k)) * step
        logu = np.log(rng.random(size))
        for j in range(size):
            prop = v + z[j]
            lp = logp(prop)
            if logu[j] < lp - cur:
                v, cur = prop, lp
                accepted += 1
            t = start + j + 1
            if t % thin == 0:
                out[t // thin - 1] = L @ v
    return out, accepted / n_steps


@dataclass
class LgpPosterior:
    grid: Grid
    params: KernelParams
    f_hat: np.ndarray
    cov_factor: np.ndarray | None
    p_mean: np.ndarray
    p_std: np.ndarray
    n_points: int
    objective: float = float("nan")

    def to_dict(self, include_factor: bool = True) -> dict:
        return {
            "schema": SCHEMA,
            "grid": self.grid.to_dict(),
            "theta": [self.params.amplitude, self.params.inv_lengthscale],
            "n_points": int(self.n_points),
            "objective": self.objective,
            "f_hat": self.f_hat.tolist(),
            "cov_factor": (self.cov_factor.tolist()
                           if include_factor and self.cov_factor is not None else None),
            "p_mean": self.p_mean.tolist(),
            "p_std": self.p_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "LgpPosterior":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported posterior schema {d.get('schema')!r}")
        factor = d.get("cov_factor")
        return cls(
            grid=Grid.from_dict(d["grid"]),
            params=KernelParams(*d["theta"]),
            f_hat=np.asarray(d["f_hat"]),
            cov_factor=None if factor is None else np.asarray(factor),
            p_mean=np.asarray(d["p_mean"]),
            p_std=np.asarray(d["p_std"]),
            n_points=int(d["n_points"]),
            objective=float(d["objective"]),
        )


@dataclass
class LatentFit:
    """Deterministic part of a level fit: MAP hyper-parameters and the
    Laplace Gaussian over the latent field."""

    params: KernelParams
    objective: float
    laplace: LaplaceResult
    chol: np.ndarray
    n_points: int


def fit_latent(grid: Grid, counts, prior: HyperPrior = HyperPrior(),
               params: KernelParams | None = None) -> LatentFit:
    counts = np.asarray(counts)
    objective = float("nan")
    if params is None:
        params, objective = hyper_map(grid, counts, prior)
    res = laplace_fit(grid, counts, params)
    chol = cholesky(res.cov) if np.any(res.cov) else np.zeros_like(res.cov)
    return LatentFit(params, objective, res, chol, int(counts.sum()))


def posterior_from_latent(grid: Grid, latent: LatentFit, draws: int, rng) -> LgpPosterior:
    p_mean, p_std = density_moments(latent.laplace.f_hat, None, grid, draws, rng,
                                    chol=latent.chol)
    return LgpPosterior(grid, latent.params, latent.laplace.f_hat, latent.chol,
                        p_mean, p_std, latent.n_points, latent.objective)


def fit_level(grid: Grid, counts, prior: HyperPrior = HyperPrior(), draws: int = 2000,
              rng=None, backend: str = "laplace", mcmc_steps: int = 200_000,
              params: KernelParams | None = None) -> LgpPosterior:
    """Fit one level: MAP hyper-parameters, latent posterior, density moments.

    ``backend="metropolis"`` replaces the Laplace Gaussian by a Metropolis
    chain started at the Laplace mode (hyper-parameters stay at their MAP).
    """
    rng = make_rng(0) if rng is None else rng
    latent = fit_latent(grid, counts, prior, params)
    if backend == "laplace":
        return posterior_from_latent(grid, latent, draws, rng)
    if backend != "metropolis":
        raise ValueError(f"unknown inference backend {backend!r}")
    thin = max(1, mcmc_steps // draws)
    fs, _ = metropolis_sample(grid, counts, latent.params, mcmc_steps, rng, thin=thin,
                              f0=latent.laplace.f_hat)
    vols = grid.cell_volumes
    dens = softmax(fs + np.log(vols), axis=1) / vols
    return LgpPosterior(grid, latent.params, latent.laplace.f_hat, None,
                        dens.mean(axis=0), dens.std(axis=0, ddof=1), latent.n_points,
                        latent.objective)
