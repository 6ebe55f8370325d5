import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from riskscope import dlgp, simbench
from riskscope.numerics import make_rng

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

LEVELS = dlgp.RobustnessLevels((-10.0, 0.0))
REGION = ((0.0, 10.0), (0.0, 10.0))


@pytest.fixture(scope="session")
def levels():
    return LEVELS


@pytest.fixture(scope="session")
def bench_data():
    """The N=500 robot benchmark dataset used throughout."""
    return simbench.generate_dataset(500, LEVELS, simbench.default_formula(), make_rng(0, 32))


@pytest.fixture(scope="session")
def bench_model(bench_data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return dlgp.fit(bench_data.inputs, bench_data.labels, LEVELS, REGION)


@pytest.fixture(scope="session")
def bench_truth(tmp_path_factory):
    cache = tmp_path_factory.mktemp("truth-cache")
    return simbench.build_truth_proxy(100_000, 0.01, LEVELS, simbench.default_formula(), 1,
                                      cache_dir=cache)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def pytest_configure(config):
    config.acceptance_verdicts = {}


def pytest_terminal_summary(terminalreporter, config):
    verdicts = getattr(config, "acceptance_verdicts", {})
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            ok = all(v for v, _ in verdicts[n])
            detail = "; ".join(d for _, d in verdicts[n])
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
