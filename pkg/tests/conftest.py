from __future__ import annotations

import math

import numpy as np
import pytest

from gammacount.count_models import gc_sample_eta
from gammacount.inference import LatentModel, PriorSpec
from gammacount.mesh import build_mesh


def make_toy(n=15, likelihood="gc", alpha=0.5, seed=3, max_edge=0.9, priors=None, intercept=1.0):
    """Small spatial count model with fewer than ten mesh vertices."""
    rng = np.random.default_rng(seed)
    loc = rng.uniform(size=(n, 2))
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    eta = intercept - 0.5 * x + 0.3 * np.sin(3.0 * loc[:, 0])
    y = gc_sample_eta(alpha, eta, rng)
    corners = np.array([[-0.05, -0.05], [1.05, -0.05], [1.05, 1.05], [-0.05, 1.05], [0.5, 0.5]])
    mesh = build_mesh(corners, max_edge=max_edge)
    return LatentModel.build(y, X, loc, mesh, likelihood=likelihood, priors=priors or PriorSpec())


# Informative field priors keep the three-parameter posterior of the small
# toy well identified, so that brute-force integration is meaningful.
ORACLE_PRIORS = PriorSpec(log_tau=(math.log(0.3), 1.0), log_kappa=(math.log(3.0), 1.0))


def make_oracle_toy():
    """n=15, m=9 under-dispersed GC toy used for the brute-force comparisons."""
    return make_toy(15, seed=3, alpha=3.0, intercept=2.0, priors=ORACLE_PRIORS)


@pytest.fixture(scope="session")
def oracle_toy():
    return make_oracle_toy()


@pytest.fixture(scope="session")
def oracle_fit(oracle_toy):
    from gammacount.inference import fit

    return fit(oracle_toy, compute_sd=True)


@pytest.fixture(scope="session")
def toy_gc():
    return make_toy()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
