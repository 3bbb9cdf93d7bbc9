from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special, stats

from gammacount.inference import LatentModel, PriorSpec, fit
from gammacount.scoring import (
    cavity_loo,
    cpo_log_score,
    dic,
    dic_terms,
    ks_uniform,
    mspe,
    pit,
    pit_histogram,
    preference_rate,
    rmse,
    score_fit,
    waic,
    waic_terms,
)

from conftest import make_toy
from oracles import dense_mode, importance_log_marginal, loglik_ref

finite_ll = arrays(
    float,
    st.tuples(st.integers(1, 6), st.integers(2, 12)),
    elements=st.floats(-30.0, 0.0, allow_nan=False),
)


def _mixture_waic_oracle(fit_result, nodes=40):
    """WAIC and mean deviance by Gauss-Hermite quadrature over the grid mixture."""
    model = fit_result.model
    z, wz = special.roots_hermitenorm(nodes)
    wz = wz / wz.sum()
    e1 = np.zeros(model.n)
    e2 = np.zeros(model.n)
    lik = np.zeros(model.n)
    for pt, w in zip(fit_result.grid.points, fit_result.grid.weights):
        th = model.full_theta(pt.theta)
        eta = pt.eta_mean[:, None] + np.sqrt(pt.eta_var)[:, None] * z[None, :]
        ll = loglik_ref(model.likelihood, model.y[:, None], eta, th)
        assert np.all(np.isfinite(ll))
        e1 += w * (ll @ wz)
        e2 += w * (ll**2 @ wz)
        lik += w * (np.exp(ll) @ wz)
    lppd = float(np.sum(np.log(lik)))
    p_waic = float(np.sum(e2 - e1**2))
    return -2.0 * (lppd - p_waic), -2.0 * float(np.sum(e1))


class TestWaic:
    def test_constant_draws(self):
        ll = np.tile(np.array([[-1.0], [-2.5], [-0.3]]), (1, 7))
        w, lppd, p = waic_terms(ll)
        assert p == 0.0
        assert w == pytest.approx(-2.0 * ll[:, 0].sum(), abs=1e-12)

    @given(finite_ll)
    def test_duplicating_draws_leaves_waic_unchanged(self, ll):
        assert waic(np.hstack([ll, ll])) == pytest.approx(waic(ll), abs=1e-9)

    @given(finite_ll, st.randoms(use_true_random=False))
    def test_reordering_invariance(self, ll, r):
        rows = list(range(ll.shape[0]))
        r.shuffle(rows)
        assert waic(ll[rows]) == pytest.approx(waic(ll), abs=1e-9)

    def test_rejects_single_draw_and_nan(self):
        with pytest.raises(ValueError):
            waic(np.zeros((3, 1)))
        with pytest.raises(ValueError):
            waic(np.array([[0.0, np.nan]]))

    def test_matches_quadrature_reference(self, oracle_fit):
        ref_waic, _ = _mixture_waic_oracle(oracle_fit)
        rep = score_fit(oracle_fit, n_draws=1000, rng=np.random.default_rng(5))
        assert rep.waic == pytest.approx(ref_waic, rel=0.01)


class TestDic:
    def test_constant_draws(self):
        ll = np.tile(np.array([[-1.0], [-2.0]]), (1, 5))
        d, p = dic_terms(ll, ll[:, 0])
        assert p == 0.0
        assert d == pytest.approx(6.0)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(1)
        ll = -rng.gamma(2.0, size=(4, 50))
        hat = ll.mean(axis=1) + 0.1
        assert dic(np.hstack([ll, ll]), hat) == pytest.approx(dic(ll, hat), abs=1e-10)

    def test_matches_quadrature_reference(self, oracle_fit):
        _, mean_dev = _mixture_waic_oracle(oracle_fit)
        rep = score_fit(oracle_fit, n_draws=1000, rng=np.random.default_rng(6))
        dev_hat = mean_dev - rep.p_dic
        ref = 2.0 * mean_dev - dev_hat
        assert rep.dic == pytest.approx(ref, rel=0.01)

    def test_waic_and_dic_close_on_well_identified_toy(self):
        model = make_toy(20, likelihood="poisson", seed=4, intercept=2.5, priors=PriorSpec())
        rep = score_fit(fit(model), n_draws=2000, rng=np.random.default_rng(2))
        assert rep.dic == pytest.approx(rep.waic, rel=0.05)


class TestCpo:
    def test_constant_draws_give_exp_c(self):
        c = np.array([-0.7, -2.0, -0.01])
        cpo, ls = cpo_log_score(np.tile(c[:, None], (1, 9)))
        assert np.allclose(cpo, np.exp(c), rtol=0, atol=1e-15)
        assert ls == pytest.approx(-c.sum())

    def test_conjugate_single_observation(self):
        # Poisson y with Gamma(a, b) prior: the leave-one-out predictive is the prior predictive (negative binomial)
        a, b, y = 5.0, 2.0, 2
        rng = np.random.default_rng(11)
        lam = rng.gamma(a + y, 1.0 / (b + 1.0), size=40_000)
        cpo, _ = cpo_log_score(stats.poisson.logpmf(y, lam)[None, :])
        exact = stats.nbinom.pmf(y, a, b / (b + 1.0))
        assert cpo[0] == pytest.approx(exact, rel=0.05)

    @given(finite_ll)
    @settings(max_examples=50)
    def test_cpo_bounded_by_max_draw_likelihood(self, ll):
        cpo, _ = cpo_log_score(ll)
        ok = ~np.isnan(cpo)
        assert np.all(cpo[ok] <= np.exp(ll.max(axis=1))[ok] * (1 + 1e-12))
        assert np.all((cpo[ok] > 0) & (cpo[ok] <= 1))

    def test_zero_likelihood_draw_flagged(self):
        ll = np.array([[-1.0, -np.inf, -1.0], [-0.5, -0.6, -0.4]])
        cpo, ls = cpo_log_score(ll)
        assert np.isnan(cpo[0]) and np.isfinite(cpo[1])
        assert ls == pytest.approx(-math.log(cpo[1]))

    def test_log_score_is_sum_over_observations(self):
        rng = np.random.default_rng(3)
        ll = -rng.gamma(2.0, size=(6, 100))
        total = cpo_log_score(ll)[1]
        parts = sum(cpo_log_score(ll[i : i + 1])[1] for i in range(6))
        assert total == pytest.approx(parts, abs=1e-10)


class TestCavityLoo:
    @pytest.fixture
    def fixed_poisson(self):
        base = make_toy(12, likelihood="poisson", seed=21, intercept=1.2, priors=PriorSpec())
        return base.with_likelihood("poisson", fixed={"log_tau": -0.5, "log_kappa": 1.2})

    def test_matches_brute_force_leave_one_out(self, fixed_poisson):
        model = fixed_poisson
        th = model.full_theta(np.zeros(0))
        rng = np.random.default_rng(8)

        def log_evidence(m):
            mode, H = dense_mode(m, th)
            return importance_log_marginal(m, th, mode, np.linalg.inv(H), 60_000, rng)[0]

        full = log_evidence(model)
        exact = []
        for i in range(model.n):
            keep = np.arange(model.n) != i
            sub = LatentModel.build(
                model.y[keep], model.X[keep], model.locations[keep], model.mesh,
                likelihood="poisson", priors=model.priors, fixed=model.fixed,
            )
            exact.append(math.exp(full - log_evidence(sub)))
        cpo, _, _ = cavity_loo(fit(model))
        err = np.abs(np.log(cpo / np.array(exact)))
        # the Gaussian site is linearized at the full-data mode, so an outlying count is the worst case
        assert np.median(err) < 0.1
        assert err.max() < 0.4
        assert np.sum(np.log(cpo)) == pytest.approx(np.sum(np.log(exact)), rel=0.01)

    def test_reordering_invariance(self, fixed_poisson):
        model = fixed_poisson
        perm = np.random.default_rng(0).permutation(model.n)
        shuffled = LatentModel.build(
            model.y[perm], model.X[perm], model.locations[perm], model.mesh,
            likelihood="poisson", priors=model.priors, fixed=model.fixed,
        )
        a = cavity_loo(fit(model))[0]
        b = cavity_loo(fit(shuffled))[0]
        assert np.allclose(a[perm], b, rtol=1e-8)


class TestPit:
    def test_far_above_posterior_mass_gives_one(self):
        lam = np.linspace(1.0, 2.0, 50)[None, :]
        y = 60
        v = pit(stats.poisson.cdf(y - 1, lam), stats.poisson.pmf(y, lam))
        assert v[0] == pytest.approx(1.0, abs=1e-12)

    def test_zero_count_mid_pit(self):
        pmf0 = np.full((1, 20), 0.3)
        assert pit(np.zeros((1, 20)), pmf0)[0] == pytest.approx(0.15)

    def test_random_mode_needs_rng_and_stays_in_unit_interval(self):
        cdf = np.array([[0.2, 0.3]])
        pmf = np.array([[0.1, 0.2]])
        with pytest.raises(ValueError):
            pit(cdf, pmf, mode="random")
        v = pit(cdf, pmf, mode="random", rng=np.random.default_rng(0))
        assert 0.0 <= v[0] <= 1.0
        with pytest.raises(ValueError):
            pit(cdf, pmf, mode="upper")

    def test_randomized_pit_uniform_for_known_distribution(self):
        rng = np.random.default_rng(4)
        y = rng.poisson(2.0, size=3000)
        lam = np.full((3000, 2), 2.0)
        v = pit(stats.poisson.cdf(y[:, None] - 1, lam), stats.poisson.pmf(y[:, None], lam), mode="random", rng=rng)
        stat, crit = ks_uniform(v)
        assert stat < crit

    def test_histogram_counts(self):
        edges, counts = pit_histogram([0.05, 0.15, 0.95, 1.0], bins=10)
        assert len(edges) == 11 and counts.sum() == 4
        assert counts[0] == 1 and counts[-1] == 2

    def test_score_fit_report_invariants(self, oracle_fit):
        rep = score_fit(oracle_fit, n_draws=300, rng=np.random.default_rng(1), pit_mode="random")
        assert np.all((rep.pit >= 0) & (rep.pit <= 1))
        assert np.all((rep.cpo > 0) & (rep.cpo <= 1))
        assert rep.log_score == pytest.approx(-np.sum(np.log(rep.cpo)))
        with pytest.raises(ValueError):
            score_fit(oracle_fit, loo="exact")


class TestSummaries:
    def test_rmse(self):
        assert rmse([0.3, 0.3], 0.3) == 0.0
        assert rmse([2.0], 0.0) == 2.0
        with pytest.raises(ValueError):
            rmse([], 1.0)

    def test_mspe(self):
        assert mspe([1.0, 2.0], [1.0, 4.0]) == 2.0
        with pytest.raises(ValueError):
            mspe([1.0], [1.0, 2.0])

    def test_preference_rate_ties_count_against(self):
        assert preference_rate([(1.0, 1.0), (2.0, 2.0)]) == 0.0
        assert preference_rate([(1.0, 2.0), (3.0, 2.0)]) == 0.5

    def test_ks_critical_value(self):
        stat, crit = ks_uniform(np.linspace(0.005, 0.995, 100))
        assert stat < 0.01
        assert crit == pytest.approx(1.358 / math.sqrt(100), rel=0.03)
