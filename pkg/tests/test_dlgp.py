import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from riskscope import dlgp, simbench
from riskscope.dirichlet import dir_mean
from riskscope.lgp import KernelParams, LgpPosterior, OutOfRegion, bin_counts, make_grid
from riskscope.numerics import make_rng
from riskscope.dlgp import (
    DlgpConfig,
    DlgpModel,
    EmptyLevel,
    LambdaPrior,
    NonFinite,
    RobustnessLevels,
    classify,
    lambda_objective,
)

LEVELS = RobustnessLevels((-10.0, 0.0))
REGION = ((0.0, 10.0), (0.0, 10.0))
UNIT = make_grid([(0.0, 1.0)], 1.0)


def toy_model(p_e, p_s, totals, alpha_prior=(1 / 3, 1 / 3, 1 / 3), grid=UNIT, lam=0.0):
    """Model whose per-level density mean/std fields are given directly."""
    posts = []
    for pe, ps in zip(np.atleast_2d(p_e), np.atleast_2d(p_s)):
        posts.append(LgpPosterior(grid, KernelParams(1.0, 1.0), np.zeros(grid.n_cells), None,
                                  np.asarray(pe, float), np.asarray(ps, float), 0))
    return DlgpModel(grid, LEVELS, posts, np.asarray(totals, float), np.asarray(alpha_prior),
                     lam)


# --- levels ---------------------------------------------------------------------


def test_classify_boundaries():
    assert classify(LEVELS, -10.0) == 0
    assert classify(LEVELS, 0.0) == 1
    assert classify(LEVELS, 0.001) == 2


def test_classify_rejects_nonfinite():
    with pytest.raises(NonFinite):
        classify(LEVELS, float("nan"))


def test_levels_must_increase():
    with pytest.raises(ValueError):
        RobustnessLevels((0.0, -1.0))


def test_levels_parse():
    assert RobustnessLevels.parse("-10,0") == LEVELS
    assert LEVELS.m == 3


@given(st.floats(-1e6, 1e6))
def test_classify_total_and_unique(rho):
    level = classify(LEVELS, rho)
    lo = -math.inf if level == 0 else LEVELS.boundaries[level - 1]
    hi = math.inf if level == LEVELS.m - 1 else LEVELS.boundaries[level]
    assert lo < rho <= hi


def test_lambda_prior_moments():
    prior = LambdaPrior()
    assert prior.mode == 2.0 and prior.variance == 3.0


# --- pseudo-counts and posterior parameters -----------------------------------


def test_pseudo_count_arithmetic():
    m = toy_model([[0.02], [0.02], [0.02]], [[0.005]] * 3, [10, 10, 10])
    assert m.pseudo_count([[0.5]], 1.0, 0) == pytest.approx(0.15, abs=1e-15)


def test_pseudo_count_lambda_zero_is_plain_estimate():
    m = toy_model([[0.02]] * 3, [[0.005]] * 3, [10, 10, 10])
    assert m.pseudo_count([[0.5]], 0.0, 1) == 10 * 0.02


def test_pseudo_count_clamped():
    m = toy_model([[0.001]] * 3, [[0.01]] * 3, [10, 10, 10])
    assert m.pseudo_count([[0.5]], 1.0, 2) == 0.0


def test_cell_measure_multiplies_by_volume():
    g = make_grid([(0.0, 2.0)], 0.5)
    pe, ps = np.full((3, 4), 0.5), np.full((3, 4), 0.1)
    dens = toy_model(pe, ps, [8, 8, 8], grid=g)
    posts = dens.posteriors
    cell = DlgpModel(g, LEVELS, posts, dens.totals, dens.alpha_prior, 0.0, count_measure="cell")
    np.testing.assert_allclose(cell.pseudo_counts(1.0), 0.5 * dens.pseudo_counts(1.0))


def test_prior_only_cell():
    m = toy_model([[0.0]] * 3, [[0.0]] * 3, [0, 0, 0])
    np.testing.assert_array_equal(m.posterior_params([[0.5]], 1.0), [1 / 3] * 3)


def test_pseudo_count_out_of_region():
    m = toy_model([[0.02]] * 3, [[0.005]] * 3, [10, 10, 10])
    with pytest.raises(OutOfRegion):
        m.pseudo_count([[2.0]], 1.0, 0)


@given(st.integers(0, 2**31), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_pseudo_count_antitone_in_lambda(seed, lam_a, lam_b):
    lo, hi = sorted((lam_a, lam_b))
    r = np.random.default_rng(seed)
    g = make_grid([(0.0, 10.0), (0.0, 10.0)], 1.0)
    pe = r.uniform(0, 0.05, (3, g.n_cells))
    model = toy_model(pe, pe * r.uniform(0.1, 2.0, pe.shape), r.integers(1, 500, 3), grid=g)
    cells = r.choice(g.n_cells, 100, replace=False)
    assert np.all(model.pseudo_counts(hi, cells) <= model.pseudo_counts(lo, cells))
    assert np.all(model.params_cells(hi, cells) >= model.alpha_prior)


def test_band_can_narrow_as_lambda_grows():
    # shrinking a minor level to its prior collapses that marginal's interval
    m = toy_model([[1.787], [0.112], [5.222]], [[2.0], [0.2], [1.353]], [1, 1, 1])
    assert m.query_cells().band[0] > m.with_lambda(1.0).query_cells().band[0]


# --- queries --------------------------------------------------------------------


def test_query_prior_cell():
    m = toy_model([[0.0]] * 3, [[0.0]] * 3, [0, 0, 0])
    q = m.query([[0.5]])
    np.testing.assert_allclose(q.mean, [1 / 3] * 3, rtol=1e-15)
    # Beta(1/3, 2/3) 2.5%/97.5% quantiles by quadrature + bisection
    assert q.band == pytest.approx(0.9851942291423671, abs=1e-9)
    assert q.mean.sum() == pytest.approx(1.0, abs=1e-12)


def test_band_shrinks_with_more_data():
    a = toy_model([[0.3], [0.2], [0.1]], [[0.0]] * 3, [10, 10, 10]).query([[0.5]])
    b = toy_model([[0.3], [0.2], [0.1]], [[0.0]] * 3, [100, 100, 100]).query([[0.5]])
    assert b.band < a.band


def test_invalid_beta():
    m = toy_model([[0.3], [0.2], [0.1]], [[0.0]] * 3, [10, 10, 10])
    with pytest.raises(ValueError):
        m.query([[0.5]], beta=1.0)


# --- lambda objective -----------------------------------------------------------


def test_objective_uses_dirichlet_mean():
    m = toy_model([[0.3], [0.2], [0.1]], [[0.05]] * 3, [10, 10, 10])
    x = np.array([[0.5], [0.2]])
    labels = np.array([0, 2])
    p = dir_mean(m.posterior_params([[0.5]], 1.5))
    expected = math.log(p[0]) + math.log(p[2]) + LambdaPrior().logpdf(1.5)
    assert lambda_objective(m, x, labels, 1.5) == pytest.approx(expected, rel=1e-14)


def test_objective_without_data_peaks_at_prior_mode():
    from riskscope.numerics import maximize_1d

    m = toy_model([[0.3], [0.2], [0.1]], [[0.05]] * 3, [10, 10, 10])
    empty = np.empty((0, 1))
    lam = maximize_1d(lambda v: lambda_objective(m, empty, np.empty(0, int), v), 0.0, 10.0)
    assert lam == pytest.approx(2.0, abs=1e-6)


# --- benchmark fit --------------------------------------------------------------


def test_three_levels_fitted(bench_model):
    assert len(bench_model.posteriors) == 3
    assert bench_model.lam == bench_model.lam_opt >= 0


def test_fit_integrates_to_one(bench_model):
    vols = bench_model.grid.cell_volumes
    for post in bench_model.posteriors:
        assert post.p_mean @ vols == pytest.approx(1.0, abs=1e-6)


def test_lambda_star_beats_dense_grid(bench_model, bench_data):
    def obj(v):
        return lambda_objective(bench_model, bench_data.inputs, bench_data.labels, v)

    dense = max(obj(v) for v in np.linspace(0.0, 10.0, 500))
    assert obj(bench_model.lam_opt) >= dense - 1e-6


def test_lambda_star_more_cautious_in_empty_cells(bench_model, bench_data):
    counts = bin_counts(bench_model.grid, bench_data.inputs, bench_data.labels, 3).counts
    empty = counts.sum(axis=0) == 0
    assert empty.any()
    band_opt = bench_model.query_cells().band[empty]
    band_zero = bench_model.with_lambda(0.0).query_cells().band[empty]
    assert np.all(band_opt >= band_zero - 1e-12)


def test_heavy_cell_band_is_narrow(bench_model, bench_data):
    counts = bin_counts(bench_model.grid, bench_data.inputs, bench_data.labels, 3).counts
    heavy = int(np.argmax(counts.sum(axis=0)))
    assert bench_model.query_cells().band[heavy] < 0.4


def test_fit_reproducible(bench_data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sub = bench_data.inputs[:150], bench_data.labels[:150]
        cfg = DlgpConfig(grid_width=1.0, draws=300, seed=4)
        a = dlgp.fit(*sub, LEVELS, REGION, cfg).to_dict()
        b = dlgp.fit(*sub, LEVELS, REGION, cfg).to_dict()
    assert json.dumps(a) == json.dumps(b)


def test_model_round_trip(bench_model):
    back = DlgpModel.from_dict(json.loads(json.dumps(bench_model.to_dict())))
    x = np.array([[3.3, 7.1]])
    np.testing.assert_array_equal(back.posterior_params(x), bench_model.posterior_params(x))
    assert back.lam == bench_model.lam


def test_empty_level_warns():
    x = np.array([[1.0, 1.0], [2.0, 2.0], [8.0, 8.0]])
    with pytest.warns(EmptyLevel):
        m = dlgp.fit(x, np.array([1, 2, 2]), LEVELS, REGION,
                     DlgpConfig(grid_width=2.0, draws=100))
    assert not m.pseudo_counts()[:, 0].any()
    assert np.all(m.params_cells()[:, 0] == pytest.approx(1 / 3))


def test_fixed_lambda_config(bench_data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = dlgp.fit(bench_data.inputs[:100], bench_data.labels[:100], LEVELS, REGION,
                     DlgpConfig(grid_width=2.0, draws=100, lam=1.0))
    assert m.lam == 1.0 and m.lam_opt is not None


@pytest.mark.slow
def test_large_n_matches_cell_level_frequencies():
    phi = simbench.default_formula()
    data = simbench.generate_dataset(5000, LEVELS, phi, make_rng(5, 32))
    # independent draw from the same input distribution: per-cell level frequencies
    ref = simbench.generate_dataset(100_000, LEVELS, phi, make_rng(99, 32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = dlgp.fit(data.inputs, data.labels, LEVELS, REGION)
    ref_counts = bin_counts(model.grid, ref.inputs, ref.labels, 3).counts
    freq = (ref_counts / np.maximum(ref_counts.sum(axis=0), 1)).T
    n_cell = bin_counts(model.grid, data.inputs, data.labels, 3).counts.sum(axis=0)
    mean = model.query_cells().mean
    for cell in np.argsort(-n_cell)[:5]:
        assert np.max(np.abs(mean[cell] - freq[cell])) < 0.05
