"""Acceptance suite: one printed PASS/FAIL line per headline criterion.

Lines are written straight to the terminal (they show without ``-s``) and
repeated in the end-of-run summary. The simulation-study criteria share one
R = 50 study, which takes roughly twenty-five minutes on one core.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest
from scipy import stats
from scipy.sparse.linalg import splu

from gammacount import cli
from gammacount.count_models import (
    GcParams,
    dean_lawless_test,
    gc_logpmf,
    gc_logpmf_deta,
    gc_pmf,
    gc_sample,
    gc_sample_eta,
    gc_support_bound,
)
from gammacount.inference import fit, gaussian_approx, log_hyper_posterior
from gammacount.mesh import Mesh, build_mesh
from gammacount.simulator import StudyConfig, run_study
from gammacount.spde_field import MaternParams, fem_matrices, matern_cov, precision_matrix, projector

from conftest import ORACLE_PRIORS, make_oracle_toy, make_toy
from oracles import dense_mode, hyper_posterior_means, importance_log_marginal, log_hyper_prior_ref

RESULTS: list = []


@pytest.fixture
def report(request):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(name, ok, detail):
        line = f"ACCEPTANCE {'PASS' if ok else 'FAIL'} | {name} | {detail}"
        RESULTS.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        return ok

    return emit


def _chi_square_p(p: GcParams, seed: int) -> float:
    draws = gc_sample(p, np.random.default_rng(seed), size=100_000)
    ymax = gc_support_bound(p)
    probs = gc_pmf(np.arange(ymax + 1), p)
    probs[-1] += max(0.0, 1.0 - probs.sum())
    counts = np.bincount(np.minimum(draws, ymax), minlength=ymax + 1)
    obs, exp, acc_o, acc_e = [], [], 0.0, 0.0
    for o, e in zip(counts, probs * draws.size):
        acc_o += o
        acc_e += e
        if acc_e >= 5.0:
            obs.append(acc_o)
            exp.append(acc_e)
            acc_o = acc_e = 0.0
    obs[-1] += acc_o
    exp[-1] += acc_e
    exp = np.array(exp) * draws.size / np.sum(exp)
    return float(stats.chisquare(obs, exp)[1])


class TestDistributionAndFields:
    def test_distribution_correctness(self, report):
        t0 = time.perf_counter()
        norm_min = min(
            float(np.sum(gc_pmf(np.arange(gc_support_bound(GcParams(a, g)) + 1), GcParams(a, g))))
            for a in (0.1, 1.0, 3.0)
            for g in (0.5, 5.0, 50.0)
        )
        ys = np.arange(51)
        pois = max(float(np.abs(gc_pmf(ys, GcParams(1.0, g)) - stats.poisson.pmf(ys, g)).max()) for g in (0.3, 2.0, 7.5, 30.0))
        integer = 0.0
        for a in (1, 2, 3, 4):
            for g in (0.4, 3.0, 12.0):
                for y in range(40):
                    closed = float(np.sum(stats.poisson.pmf(np.arange(a * y, a * y + a), g)))
                    integer = max(integer, abs(float(gc_pmf(y, GcParams(float(a), g))) - closed))
        pvals = [_chi_square_p(GcParams(a, g), 5) for a, g in ((0.3, 1.0), (1.0, 4.0), (2.5, 8.0), (4.0, 30.0))]
        secs = time.perf_counter() - t0
        ok = norm_min >= 1 - 1e-10 and pois < 1e-12 and integer < 1e-12 and min(pvals) > 0.001 and secs < 10
        detail = (f"min normalization {norm_min:.15f}, Poisson gap {pois:.1e}, integer-alpha gap {integer:.1e}, "
                  f"min chi-square p {min(pvals):.3f}, {secs:.1f}s")
        assert report("Distribution correctness", ok, detail)

    def test_score_correctness(self, report):
        t0 = time.perf_counter()
        h, worst = 1e-5, 0.0
        for y in range(31):
            for alpha in np.linspace(0.1, 4.0, 8):
                for eta in np.linspace(-2.0, 3.0, 11):
                    an = gc_logpmf_deta(y, GcParams.from_eta(alpha, eta))
                    fd = (gc_logpmf(y, GcParams.from_eta(alpha, eta + h))
                          - gc_logpmf(y, GcParams.from_eta(alpha, eta - h))) / (2 * h)
                    worst = max(worst, abs(an - fd) / max(abs(fd), 1.0))
        secs = time.perf_counter() - t0
        ok = worst < 1e-6 and secs < 5
        assert report("Score correctness", ok, f"worst relative error {worst:.2e} over 2728 points, {secs:.1f}s")

    def test_fem_exactness(self, report):
        tri = fem_matrices(Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]])))
        exact_c = bool(np.array_equal(tri.c_tilde, np.full(3, 1 / 6)))
        exact_g = bool(np.array_equal(tri.g.toarray(), 0.5 * np.array([[2.0, -1, -1], [-1, 1, 0], [-1, 0, 1]])))
        g1 = area = 0.0
        for seed in range(5):
            m = build_mesh(np.random.default_rng(seed).uniform(size=(60, 2)), max_edge=0.15, extension=0.2)
            fem = fem_matrices(m)
            g1 = max(g1, float(np.abs(fem.g @ np.ones(fem.n)).max()))
            area = max(area, abs(float(fem.c_tilde.sum()) - m.area()))
        ok = exact_c and exact_g and g1 < 1e-10 and area < 1e-10
        detail = f"unit triangle exact C {exact_c} G {exact_g}; random meshes max|G1| {g1:.1e}, |sum C - area| {area:.1e}"
        assert report("FEM exactness", ok, detail)

    def test_spde_fidelity(self, report):
        t0 = time.perf_counter()
        params = MaternParams.from_range(1.0, 0.2)
        g = np.linspace(0.0, 1.0, 11)
        mesh = build_mesh(np.array([[a, b] for a in g for b in g]), max_edge=0.03, extension=0.5)
        v = mesh.vertices
        inner = np.flatnonzero(np.all((v > 0.3) & (v < 0.7), axis=1))
        q = precision_matrix(fem_matrices(mesh), params.kappa, params.tau_spde)
        a = projector(mesh, v[inner])
        s = np.asarray(a @ splu(q.tocsc()).solve(a.T.toarray()))
        sd = np.sqrt(np.diag(s))
        corr = s / np.outer(sd, sd)
        d = np.linalg.norm(v[inner, None] - v[None, inner], axis=2)
        band = (d >= 0.05) & (d <= 0.4)
        err = float(np.abs(corr[band] - matern_cov(d[band], MaternParams(1.0, params.kappa))).max())
        at_r = corr[np.abs(d - 0.2) < 0.005]
        secs = time.perf_counter() - t0
        ok = err <= 0.05 and at_r.size > 0 and at_r.min() >= 0.08 and at_r.max() <= 0.18 and secs < 60
        detail = (f"max |corr error| {err:.4f} on [0.05, 0.4], corr at r in [{at_r.min():.3f}, {at_r.max():.3f}], "
                  f"{mesh.n_vertices} vertices, {secs:.1f}s")
        assert report("SPDE fidelity", ok, detail)


class TestInferenceOracle:
    def test_inference_oracle_equivalence(self, report):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        toys = {
            "gc n=15": make_oracle_toy(),
            "poisson n=20": make_toy(20, likelihood="poisson", seed=8, intercept=1.5, priors=ORACLE_PRIORS),
        }
        mean_err, lm_err, edge, parts = 0.0, 0.0, 0.0, []
        for label, model in toys.items():
            res = fit(model)
            th, w = res.grid.thetas, res.grid.weights
            centre = w @ th
            cov = (th - centre).T @ ((th - centre) * w[:, None])

            def proposal(t, model=model):
                ga = gaussian_approx(model, model.full_theta(t))
                return ga.mode, np.linalg.inv(ga.precision().toarray()) * 1.3

            ref = hyper_posterior_means(model, centre, cov, proposal, rng, nodes=7, half_width=4.5, n_draws=1500)
            edge = max(edge, ref["edge_mass"])
            for k, name in enumerate(model.hyper_names):
                got = res.hyper_mean(name[4:])
                mean_err = max(mean_err, abs(got / ref["exp_theta_mean"][k] - 1.0))
            for t in (centre, centre + np.sqrt(np.diag(cov)), centre - np.sqrt(np.diag(cov))):
                full = model.full_theta(t)
                val, _ = log_hyper_posterior(model, t, correction="cavity")
                mode, H = dense_mode(model, full)
                lm, _ = importance_log_marginal(model, full, mode, np.linalg.inv(H) * 1.3, 200_000, rng)
                lm_err = max(lm_err, abs(val - log_hyper_prior_ref(model, full) - lm))
            parts.append(label)
        secs = time.perf_counter() - t0
        ok = mean_err < 0.10 and lm_err < 0.15 and edge < 0.01 and secs < 120
        detail = (f"toys {', '.join(parts)}: max hyper-mean rel error {mean_err:.3f}, max log-marginal gap "
                  f"{lm_err:.3f}, oracle box edge mass {edge:.1e}, {secs:.1f}s")
        assert report("Inference oracle equivalence", ok, detail)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    cfg = StudyConfig(workers=max(1, min(4, os.cpu_count() or 1)))
    t0 = time.perf_counter()
    res = run_study(cfg)
    secs = time.perf_counter() - t0
    res.write(tmp_path_factory.mktemp("study"))
    return res, secs


class TestSimulationStudy:
    def test_desk_scale_study(self, study, report):
        res, secs = study
        pr = {row[0]: dict(zip(res.config.alpha_grid, row[1:])) for row in res.preference_rates()}
        rmse = {(r[0], r[1]): dict(zip(res.config.alpha_grid, r[2:])) for r in res.rmse_table()}
        checks = {
            "PR(GC/Poisson) a=3 >= 0.7": pr["gc/poisson"][3.0] >= 0.7,
            "PR(GC/Poisson) a=1.5 >= 0.7": pr["gc/poisson"][1.5] >= 0.7,
            "PR(GC/NB) a=0.1 >= 0.8": pr["gc/nb"][0.1] >= 0.8,
            "PR(GC/Poisson) a=1 < 0.6": pr["gc/poisson"][1.0] < 0.6,
            "RMSE x1 GC < NB at a=1.5": rmse[("x1", "gc")][1.5] < rmse[("x1", "nb")][1.5],
            "runtime < 30 min": secs < 1800,
        }
        failed = sum(r["status"] != "ok" for r in res.records)
        detail = (
            f"PR(GC/Poisson) a=3 {pr['gc/poisson'][3.0]:.2f}, a=1.5 {pr['gc/poisson'][1.5]:.2f}, "
            f"a=1 {pr['gc/poisson'][1.0]:.2f}; PR(GC/NB) a=0.1 {pr['gc/nb'][0.1]:.2f}; "
            f"RMSE x1 a=1.5 GC {rmse[('x1', 'gc')][1.5]:.4f} vs NB {rmse[('x1', 'nb')][1.5]:.4f}; "
            f"{failed} failed fits; {secs / 60:.1f} min; unmet: {[k for k, v in checks.items() if not v] or 'none'}"
        )
        assert report("Desk-scale simulation study", all(checks.values()), detail)

    def test_pit_calibration(self, study, report):
        res, _ = study
        true_rates = {a: res.ks_pass_rate(a, "gc") for a in res.config.alpha_grid}
        poisson_fail = 1.0 - res.ks_pass_rate(0.1, "poisson")
        ok = min(true_rates.values()) >= 0.8 and poisson_fail >= 0.6
        rates = ", ".join(f"a={a:g} {r:.2f}" for a, r in true_rates.items())
        detail = f"GC on own data passes KS: {rates}; Poisson on a=0.1 data fails KS in {poisson_fail:.2f}"
        assert report("PIT calibration", ok, detail)

    def test_alpha_one_waic_difference_is_noise(self, study):
        res, _ = study
        pairs = res.waic_pairs(1.0, "poisson")
        diff = pairs[:, 0] - pairs[:, 1]
        assert np.median(np.abs(diff)) < 0.25 * np.std(pairs[:, 1])


class TestDeanLawless:
    def test_dean_lawless(self, report):
        stat = []
        for r in range(1000):
            rng = np.random.default_rng([7, r])
            x = rng.normal(size=150)
            mu = np.exp(1.0 - 0.7 * x)
            stat.append(dean_lawless_test(rng.poisson(mu), mu).statistic)
        stat = np.array(stat)
        rejected = 0
        for r in range(200):
            rng = np.random.default_rng([8, r])
            x = rng.normal(size=150)
            X = np.column_stack([np.ones(150), x])
            y = gc_sample_eta(0.1, 1.0 - 0.7 * x, rng)
            _, mu_hat = cli.poisson_irls(y, X)
            rejected += dean_lawless_test(y, mu_hat).p_value_one_sided < 0.05
        rate = rejected / 200
        ok = abs(stat.mean()) <= 0.1 and abs(stat.var() - 1.0) <= 0.15 and rate >= 0.9
        detail = f"null mean {stat.mean():+.3f}, variance {stat.var():.3f}; rejection on a=0.1 n=150 data {rate:.2f}"
        assert report("Dean-Lawless", ok, detail)


class TestReproducibility:
    def test_end_to_end_reproducibility(self, tmp_path, report):
        d = make_toy(60, alpha=0.7, seed=12)
        data = tmp_path / "d.csv"
        rows = ["x,y,count,x1"] + [
            f"{float(d.locations[i, 0])!r},{float(d.locations[i, 1])!r},{int(d.y[i])},{float(d.X[i, 1])!r}" for i in range(d.n)
        ]
        data.write_text("\n".join(rows) + "\n", encoding="utf-8")
        study_cfg = tmp_path / "study.cfg"
        study_cfg.write_text("n = 30\nreplicates = 2\nalpha_grid = 0.5,2\nmax_edge = 0.25\nn_draws = 200\n")
        runs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            codes = [
                cli.main(["fit", "--data", str(data), "--seed", "4", "--out", str(out / "fit")]),
                cli.main(["score", "--data", str(data), "--seed", "4", "--likelihood", "nb", "--out", str(out / "score")]),
                cli.main(["predict", "--fit", str(out / "fit"), "--grid", "8,8", "--out", str(out / "pred")]),
                cli.main(["simulate", "--config", str(study_cfg), "--seed", "3", "--out", str(out / "sim")]),
            ]
            assert codes == [0, 0, 0, 0]
            files = {}
            for p in sorted(out.rglob("*")):
                if p.is_file() and p.name != "run_config.txt":
                    files[str(p.relative_to(out))] = p.read_bytes()
            runs.append(files)
        csvs = [k for k in runs[0] if k.endswith(".csv")]
        same = runs[0] == runs[1]
        diff = [k for k in runs[0] if runs[0][k] != runs[1].get(k)]
        detail = f"{len(csvs)} CSV files (and {len(runs[0]) - len(csvs)} others) compared; differing: {diff or 'none'}"
        assert report("End-to-end reproducibility", same and len(csvs) > 10, detail)
