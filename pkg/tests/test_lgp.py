import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from riskscope.lgp import (
    Grid,
    HyperPrior,
    KernelParams,
    LgpPosterior,
    OutOfRegion,
    TooManyCells,
    bin_counts,
    density_moments,
    fit_level,
    hyper_map,
    hyper_objective,
    kernel_matrix,
    laplace_fit,
    log_likelihood,
    make_grid,
)
from riskscope.numerics import make_rng

LINE = make_grid([(0.0, 5.0)], 1.0)


# --- grid and counts ------------------------------------------------------------


def test_benchmark_grid_has_400_cells():
    g = make_grid([(0, 10), (0, 10)], 0.5)
    assert g.n_cells == 400 and g.shape == (20, 20)
    assert g.cell_area == 0.25


def test_unit_grid():
    g = make_grid([(0, 1)], 1.0)
    assert g.n_cells == 1
    np.testing.assert_array_equal(g.centers, [[0.5]])


def test_zero_width():
    with pytest.raises(ValueError):
        make_grid([(0, 1)], 0.0)


def test_cell_cap():
    with pytest.raises(TooManyCells):
        make_grid([(0, 100), (0, 100)], 0.1)


def test_ragged_edge_cells_are_clipped():
    g = make_grid([(0.0, 1.25)], 0.5)
    np.testing.assert_allclose(g.cell_volumes, [0.5, 0.5, 0.25])
    assert g.cell_volumes.sum() == pytest.approx(g.region_volume)


def test_boundary_goes_to_lower_cell():
    g = make_grid([(0, 2)], 1.0)
    assert g.locate([[1.0]])[0] == 0
    assert g.locate([[0.0]])[0] == 0 and g.locate([[2.0]])[0] == 1


def test_out_of_region():
    with pytest.raises(OutOfRegion):
        make_grid([(0, 1)], 0.5).locate([[1.5]])


def test_counts_empty():
    c = bin_counts(LINE, np.empty((0, 1)), np.empty(0, int), 2)
    assert not c.counts.any()


def test_counts_one_per_cell():
    c = bin_counts(LINE, LINE.centers, np.zeros(5, int), 1)
    np.testing.assert_array_equal(c.counts, np.ones((1, 5)))


def test_counts_conserve_level_histogram(bench_data):
    g = make_grid([(0, 10), (0, 10)], 0.5)
    c = bin_counts(g, bench_data.inputs, bench_data.labels, 3)
    np.testing.assert_array_equal(c.totals, bench_data.level_counts())


# --- likelihood -----------------------------------------------------------------


def test_likelihood_uniform_field():
    counts = np.array([3.0, 0.0, 5.0, 2.0])
    value, _ = log_likelihood(counts, np.full(4, 1.7))
    assert value == pytest.approx(-10 * np.log(4), rel=1e-14)


def test_likelihood_no_counts():
    value, grad = log_likelihood(np.zeros(3), np.array([1.0, -2.0, 0.5]))
    assert value == 0.0 and not grad.any()


def test_likelihood_is_stable_for_large_fields():
    value, grad = log_likelihood(np.array([1.0, 0.0]), np.array([1000.0, 0.0]))
    assert np.isfinite(value) and np.all(np.isfinite(grad))


@given(st.integers(0, 2**31), st.integers(2, 30))
def test_likelihood_gradient_finite_differences(seed, k):
    r = np.random.default_rng(seed)
    f = r.normal(scale=2.0, size=k)
    counts = r.integers(0, 20, size=k).astype(float)
    _, grad = log_likelihood(counts, f)
    h = 1e-5
    fd = np.array([
        (log_likelihood(counts, f + h * e)[0] - log_likelihood(counts, f - h * e)[0]) / (2 * h)
        for e in np.eye(k)
    ])
    assert np.linalg.norm(grad - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


# --- Laplace --------------------------------------------------------------------


def test_laplace_prior_recovered_without_data():
    params = KernelParams(1.0, 0.5)
    res = laplace_fit(LINE, np.zeros(5), params)
    np.testing.assert_array_equal(res.f_hat, 0.0)
    np.testing.assert_allclose(res.cov, kernel_matrix(LINE.centers, params), atol=1e-14)


@given(st.integers(0, 2**31))
def test_laplace_stationary_and_monotone(seed):
    r = np.random.default_rng(seed)
    g = make_grid([(0, 4), (0, 3)], 0.5)
    counts = r.poisson(r.uniform(0, 6, g.n_cells)).astype(float)
    params = KernelParams(float(r.uniform(0.1, 5)), float(r.uniform(0.05, 3)))
    res = laplace_fit(g, counts, params)
    assert res.grad_norm < 1e-6
    assert np.all(np.diff(res.objective_trace) >= 0)


def test_laplace_covariance_formula():
    params = KernelParams(2.0, 0.3)
    counts = np.array([4.0, 8.0, 15.0, 8.0, 4.0])
    res = laplace_fit(LINE, counts, params)
    K = kernel_matrix(LINE.centers, params)
    p = np.exp(res.f_hat - res.f_hat.max())
    p /= p.sum()
    W = counts.sum() * (np.diag(p) - np.outer(p, p))
    np.testing.assert_allclose(res.cov, np.linalg.inv(np.linalg.inv(K) + W), atol=1e-8)


# --- hyper-parameters -----------------------------------------------------------


def test_hyper_map_without_data_is_lowest_corner():
    params, _ = hyper_map(LINE, np.zeros(5))
    assert (params.amplitude, params.inv_lengthscale) == (0.01, 0.01)


def test_hyper_map_beats_coarse_grid():
    counts = np.array([4.0, 8.0, 15.0, 8.0, 4.0])
    prior = HyperPrior()
    params, best = hyper_map(LINE, counts, prior)
    values = np.geomspace(*prior.bounds, prior.n_grid)
    coarse = max(hyper_objective(LINE, counts, KernelParams(a, b), prior)
                 for a in values for b in values)
    assert best >= coarse - 1e-12
    assert hyper_objective(LINE, counts, params, prior) == pytest.approx(best, rel=1e-9)


def test_hyper_map_lengthscale_near_dense_oracle():
    g = make_grid([(0.0, 10.0)], 0.5)
    x = np.clip(np.random.default_rng(5).normal(5.0, 1.5, 400), 0, 10)
    counts = bin_counts(g, x[:, None], np.zeros(400, int), 1).counts[0]
    params, _ = hyper_map(g, counts)
    dense = np.geomspace(1e-2, 1e2, 200)
    obj = [hyper_objective(g, counts, KernelParams(params.amplitude, t), HyperPrior())
           for t in dense]
    oracle = dense[int(np.argmax(obj))]
    assert 1 / 3 <= params.inv_lengthscale / oracle <= 3


# --- density moments ------------------------------------------------------------


def test_moments_integrate_to_one():
    g = make_grid([(0.0, 2.25), (0.0, 1.0)], 0.5)
    r = make_rng(0)
    K = kernel_matrix(g.centers, KernelParams(1.5, 0.7))
    mean, std = density_moments(r.normal(size=g.n_cells), K, g, 500, r)
    assert mean @ g.cell_volumes == pytest.approx(1.0, abs=1e-6)
    assert np.all(std > 0)


def test_moments_zero_covariance():
    f = np.array([0.0, 1.0, -1.0, 2.0, 0.5])
    mean, std = density_moments(f, np.zeros((5, 5)), LINE, 10, make_rng(0))
    np.testing.assert_allclose(std, 0.0, atol=1e-12)
    np.testing.assert_allclose(mean, np.exp(f) / np.exp(f).sum(), rtol=1e-14)


def test_moments_shift_invariant():
    f = np.array([0.0, 1.0, -1.0, 2.0, 0.5])
    cov = kernel_matrix(LINE.centers, KernelParams(0.5, 0.2))
    a, _ = density_moments(f, cov, LINE, 300, make_rng(9))
    b, _ = density_moments(f + 7.5, cov, LINE, 300, make_rng(9))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_moments_reproducible():
    cov = kernel_matrix(LINE.centers, KernelParams(0.5, 0.2))
    a = density_moments(np.zeros(5), cov, LINE, 100, make_rng(3, 1))
    b = density_moments(np.zeros(5), cov, LINE, 100, make_rng(3, 1))
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_no_data_keeps_prior_uncertainty():
    post = fit_level(LINE, np.zeros(5), draws=200)
    assert np.all(post.p_std > 0)


def test_draw_count_converged_on_benchmark(bench_model):
    post = bench_model.posteriors[2]
    grid = bench_model.grid
    # 10^5 draws in chunks, pooled means
    sums = np.zeros(grid.n_cells)
    for k in range(10):
        m, _ = density_moments(post.f_hat, None, grid, 10_000, make_rng(77, k),
                               chol=post.cov_factor)
        sums += m
    ref = sums / 10
    assert np.max(np.abs(post.p_mean - ref)) / ref.max() < 0.02


def test_error_shrinks_with_data():
    g = make_grid([(-4.0, 4.0)], 0.5)
    c = g.centers[:, 0]
    truth = norm.cdf(c + 0.25) - norm.cdf(c - 0.25)
    truth /= truth.sum() * 0.5
    err, spread = [], []
    for n in (100, 1000, 10000):
        x = np.random.default_rng(n).normal(size=n)
        x = x[np.abs(x) < 4][:, None]
        counts = bin_counts(g, x, np.zeros(len(x), int), 1).counts[0]
        post = fit_level(g, counts, draws=1000, rng=make_rng(n))
        err.append(np.max(np.abs(post.p_mean - truth)))
        spread.append(post.p_std.mean())
    assert err[1] <= 1.1 * err[0] and err[2] <= 1.1 * err[1]
    assert spread[1] <= 1.1 * spread[0] and spread[2] <= 1.1 * spread[1]


def test_posterior_round_trip():
    post = fit_level(LINE, np.array([1, 2, 3, 2, 1]), draws=50)
    back = LgpPosterior.from_dict(post.to_dict())
    assert back.grid == post.grid and back.params == post.params
    np.testing.assert_array_equal(back.p_mean, post.p_mean)
    np.testing.assert_array_equal(back.cov_factor, post.cov_factor)
    assert LgpPosterior.from_dict(post.to_dict(include_factor=False)).cov_factor is None


def test_grid_round_trip():
    g = make_grid([(0, 10), (-1, 3)], 0.5)
    assert Grid.from_dict(g.to_dict()) == g
