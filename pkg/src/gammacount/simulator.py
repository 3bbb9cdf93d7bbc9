"""Simulation study: GC counts over a Matérn field, fitted by GC, Poisson and NB.

Each replicate draws uniform sites on the unit square, a standard normal
covariate and an exact Matérn field at the sites. Counts for every
dispersion value in the grid share those draws. The three likelihoods are
fitted on one mesh per replicate and scored. Aggregates (RMSE, preference
rates, MSPE/WAIC, PIT histograms) are pure reductions of the per-replicate
records and are written as CSV.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from . import count_models, scoring
from .inference import ConvergenceError, InferenceError, LatentModel, PriorSpec, fit, hyper_transforms
from .mesh import MeshError, build_mesh
from .spde_field import MaternParams, matern_cov

log = logging.getLogger(__name__)

MODELS = ("gc", "poisson", "nb")
PIT_BINS = 10
ESTIMATE_NAMES = ("intercept", "x1", "range", "sigma", "dispersion")


@dataclass(frozen=True)
class StudyConfig:
    """Settings of the simulation study; every field has a flat key-value form."""

    n: int = 200
    replicates: int = 50
    alpha_grid: tuple = (0.1, 1.0, 1.5, 3.0)
    sigma2: float = 1.0
    range: float = 0.2
    coefficients: tuple = (1.0, -0.7)
    seed: int = 20240101
    models: tuple = MODELS
    max_edge: float = 0.07
    extension: float = 0.2
    strategy: str = "ccd"
    grid_step: float = 1.25
    grid_drop: float = 4.5
    correction: str = "cavity"
    n_draws: int = 1000
    pit_mode: str = "random"
    workers: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if not self.alpha_grid or any(a <= 0 for a in self.alpha_grid):
            raise ValueError("alpha_grid must hold positive values")
        if len(self.coefficients) != 2:
            raise ValueError("coefficients are (intercept, slope)")
        if not self.models or set(self.models) - set(MODELS):
            raise ValueError(f"models must be a non-empty subset of {MODELS}")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    @property
    def field(self) -> MaternParams:
        return MaternParams.from_range(self.sigma2, self.range)

    @classmethod
    def from_mapping(cls, items: dict) -> "StudyConfig":
        """Build from string values, e.g. a parsed key-value file; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in items.items():
            if key not in known:
                raise ValueError(f"unknown study setting {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                parts = [p.strip() for p in str(raw).split(",") if p.strip()]
                kw[key] = tuple(parts) if key == "models" else tuple(float(p) for p in parts)
            elif isinstance(default, bool):
                kw[key] = str(raw).lower() in ("1", "true", "on", "yes")
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = str(raw)
        return cls(**kw)

    def items(self) -> list:
        out = []
        for k, v in asdict(self).items():
            out.append((k, ",".join(_fmt(x) for x in v) if isinstance(v, tuple) else _fmt(v)))
        return out


class SimulatedData(NamedTuple):
    locations: np.ndarray
    covariate: np.ndarray
    y: np.ndarray
    true_field: np.ndarray
    eta: np.ndarray
    alpha: float


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        # shortest text that parses back to the same double
        return repr(float(v))
    return str(v)


def _alpha_key(alpha: float) -> int:
    return int(round(alpha * 1_000_000))


def simulate_sites(config: StudyConfig, replicate_index: int):
    """Sites, covariate and field of one replicate, seeded by ``(seed, replicate_index)``."""
    rng = np.random.default_rng([config.seed, replicate_index])
    loc = rng.uniform(size=(config.n, 2))
    x = rng.standard_normal(config.n)
    cov = matern_cov(cdist(loc, loc), config.field)
    chol = np.linalg.cholesky(cov + 1e-10 * config.sigma2 * np.eye(config.n))
    phi = chol @ rng.standard_normal(config.n)
    return loc, x, phi


def simulate_dataset(config: StudyConfig, replicate_index: int, alpha: float | None = None) -> SimulatedData:
    """One replicate's data; counts are seeded by ``(seed, replicate_index, alpha)``.

    ``alpha`` defaults to the first entry of ``config.alpha_grid``. Counts
    are simulated from the renewal process with Gamma(alpha) waiting times,
    so ``alpha = 1`` gives Poisson counts with mean ``exp(eta)``.
    """
    alpha = float(config.alpha_grid[0] if alpha is None else alpha)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    loc, x, phi = simulate_sites(config, replicate_index)
    b0, b1 = config.coefficients
    eta = b0 + b1 * x + phi
    rng = np.random.default_rng([config.seed, replicate_index, _alpha_key(alpha)])
    y = count_models.gc_sample_eta(alpha, eta, rng)
    return SimulatedData(loc, x, y, phi, eta, alpha)


# ---------------------------------------------------------------------------
# one replicate
# ---------------------------------------------------------------------------


def _estimates(fit_result) -> dict:
    beta = fit_result.beta_mean
    grid = fit_result.grid
    trans = hyper_transforms(fit_result.model, grid.thetas)
    w = grid.weights
    disp = trans.get("alpha", trans.get("size"))
    return {
        "intercept": float(beta[0]),
        "x1": float(beta[1]),
        "range": float(np.sum(w * trans["range"])),
        "sigma": float(np.sum(w * trans["sigma"])),
        "dispersion": float(np.sum(w * disp)) if disp is not None else float("nan"),
    }


def fit_and_score(config: StudyConfig, data: SimulatedData, mesh, likelihood: str, replicate_index: int) -> dict:
    """Fit one likelihood to one dataset and return its raw record."""
    X = np.column_stack([np.ones(len(data.y)), data.covariate])
    model = LatentModel.build(data.y, X, data.locations, mesh, likelihood=likelihood, priors=PriorSpec())
    res = fit(
        model, step=config.grid_step, drop=config.grid_drop, correction=config.correction, strategy=config.strategy
    )
    rng = np.random.default_rng([config.seed, replicate_index, _alpha_key(data.alpha), MODELS.index(likelihood)])
    rep = scoring.score_fit(res, config.n_draws, rng, pit_mode=config.pit_mode, field_true=data.true_field)
    ks, crit = scoring.ks_uniform(rep.pit)
    _, counts = scoring.pit_histogram(rep.pit, PIT_BINS)
    rec = {"status": "ok", "error": ""}
    rec.update(_estimates(res))
    rec.update(
        {
            "waic": rep.waic,
            "p_waic": rep.p_waic,
            "dic": rep.dic,
            "log_score": rep.log_score,
            "mspe": rep.mspe,
            "pit_ks": ks,
            "pit_ks_crit": crit,
            "n_grid": len(res.grid),
        }
    )
    rec.update({f"pit_bin_{b}": int(c) for b, c in enumerate(counts)})
    return rec


def run_replicate(config: StudyConfig, replicate_index: int) -> list:
    """All dispersion values and models of one replicate; failures become records."""
    loc, _, _ = simulate_sites(config, replicate_index)
    records = []
    try:
        mesh = build_mesh(loc, config.max_edge, config.extension)
    except MeshError as exc:
        mesh, mesh_error = None, f"mesh: {exc}"
    else:
        mesh_error = ""
    for alpha in config.alpha_grid:
        data = simulate_dataset(config, replicate_index, alpha)
        for lik in config.models:
            base = {"replicate": replicate_index, "alpha": float(alpha), "model": lik}
            if mesh is None:
                records.append({**base, "status": "failed", "error": mesh_error})
                continue
            try:
                rec = fit_and_score(config, data, mesh, lik, replicate_index)
            except (ConvergenceError, InferenceError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                log.warning("replicate %d alpha %g %s failed: %s", replicate_index, alpha, lik, exc)
                rec = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            records.append({**base, **rec})
    return records


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


RAW_COLUMNS = (
    ("replicate", "alpha", "model", "status")
    + ESTIMATE_NAMES
    + ("waic", "p_waic", "dic", "log_score", "mspe", "pit_ks", "pit_ks_crit", "n_grid")
    + tuple(f"pit_bin_{b}" for b in range(PIT_BINS))
    + ("error",)
)


@dataclass
class StudyResult:
    config: StudyConfig
    records: list = field(default_factory=list)

    def ok(self, alpha: float, model: str) -> list:
        return [r for r in self.records if r["alpha"] == alpha and r["model"] == model and r["status"] == "ok"]

    def failures(self, alpha: float, model: str) -> int:
        return sum(1 for r in self.records if r["alpha"] == alpha and r["model"] == model and r["status"] != "ok")

    def truth(self, alpha: float) -> dict:
        b0, b1 = self.config.coefficients
        return {"intercept": b0, "x1": b1, "range": self.config.range, "sigma": math.sqrt(self.config.sigma2),
                "dispersion": alpha}

    def rmse_table(self) -> list:
        """Rows ``(parameter, model, rmse per alpha ...)``; dispersion only for GC (size has no truth)."""
        rows = []
        for name in ESTIMATE_NAMES:
            for lik in self.config.models:
                if name == "dispersion" and lik != "gc":
                    continue
                vals = []
                for a in self.config.alpha_grid:
                    est = [r[name] for r in self.ok(a, lik)]
                    vals.append(scoring.rmse(est, self.truth(a)[name]) if est else float("nan"))
                rows.append(("alpha" if name == "dispersion" else name, lik, *vals))
        return rows

    def waic_pairs(self, alpha: float, other: str):
        gc = {r["replicate"]: r["waic"] for r in self.ok(alpha, "gc")}
        ot = {r["replicate"]: r["waic"] for r in self.ok(alpha, other)}
        common = sorted(set(gc) & set(ot))
        return np.array([(gc[i], ot[i]) for i in common]).reshape(len(common), 2)

    def preference_rates(self) -> list:
        """Rows ``(comparison, PR per alpha ..., replicates compared per alpha ...)``."""
        rows = []
        for other in ("poisson", "nb"):
            if "gc" not in self.config.models or other not in self.config.models:
                continue
            prs, ns = [], []
            for a in self.config.alpha_grid:
                pairs = self.waic_pairs(a, other)
                prs.append(scoring.preference_rate(pairs) if len(pairs) else float("nan"))
                ns.append(len(pairs))
            rows.append((f"gc/{other}", *prs, *ns))
        return rows

    def mspe_waic_table(self) -> list:
        rows = []
        for lik in self.config.models:
            for a in self.config.alpha_grid:
                ok = self.ok(a, lik)
                mspe = float(np.mean([r["mspe"] for r in ok])) if ok else float("nan")
                waic = float(np.mean([r["waic"] for r in ok])) if ok else float("nan")
                rows.append((lik, a, mspe, waic, len(ok), self.failures(a, lik)))
        return rows

    def pit_histogram(self, alpha: float, model: str):
        edges = np.linspace(0.0, 1.0, PIT_BINS + 1)
        counts = np.zeros(PIT_BINS, dtype=int)
        for r in self.ok(alpha, model):
            counts += np.array([r[f"pit_bin_{b}"] for b in range(PIT_BINS)], dtype=int)
        return edges, counts

    def ks_pass_rate(self, alpha: float, model: str) -> float:
        ok = self.ok(alpha, model)
        if not ok:
            return float("nan")
        return float(np.mean([r["pit_ks"] < r["pit_ks_crit"] for r in ok]))

    # -- output ------------------------------------------------------------

    def tables(self) -> dict:
        """File name -> CSV text for every study output."""
        a_cols = [f"alpha={format(float(a), 'g')}" for a in self.config.alpha_grid]
        out = {"study_raw.csv": _csv(RAW_COLUMNS, [[r.get(c, "") for c in RAW_COLUMNS] for r in self.records])}
        out["table_rmse.csv"] = _csv(("parameter", "model", *a_cols), self.rmse_table())
        out["table_pr.csv"] = _csv(
            ("comparison", *a_cols, *[f"n_{c}" for c in a_cols]), self.preference_rates()
        )
        out["table_mspe_waic.csv"] = _csv(
            ("model", "alpha", "mspe", "waic", "n_ok", "n_failed"), self.mspe_waic_table()
        )
        for lik in self.config.models:
            for a in self.config.alpha_grid:
                edges, counts = self.pit_histogram(a, lik)
                rows = [(edges[b], edges[b + 1], counts[b]) for b in range(PIT_BINS)]
                out[f"pit_hist_{lik}_{format(float(a), 'g')}.csv"] = _csv(("bin_lo", "bin_hi", "count"), rows)
        return out

    def write(self, out_dir) -> list:
        out_dir = Path(out_dir)
        paths = []
        for name, text in self.tables().items():
            paths.append(atomic_write(out_dir / name, text))
        return paths

    @classmethod
    def from_raw_csv(cls, config: StudyConfig, text: str) -> "StudyResult":
        """Rebuild the records from ``study_raw.csv`` text."""
        records = []
        for row in csv.DictReader(io.StringIO(text)):
            rec = {"replicate": int(row["replicate"]), "alpha": float(row["alpha"]), "model": row["model"],
                   "status": row["status"], "error": row["error"]}
            if row["status"] == "ok":
                for c in RAW_COLUMNS[4:-1]:
                    rec[c] = int(row[c]) if c.startswith("pit_bin_") or c == "n_grid" else float(row[c])
            records.append(rec)
        return cls(config, records)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def run_study(config: StudyConfig, progress=None) -> StudyResult:
    """Run every replicate (in worker processes when ``config.workers > 1``).

    Records are ordered by replicate index whatever the completion order, so
    the result depends only on the configuration. ``progress`` is called
    with ``(done, total)`` after each replicate.
    """
    reps = range(config.replicates)
    by_rep = {}
    if config.workers == 1:
        for i in reps:
            by_rep[i] = run_replicate(config, i)
            if progress:
                progress(len(by_rep), config.replicates)
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(run_replicate, config, i): i for i in reps}
            for fut, i in futures.items():
                by_rep[i] = fut.result()
                if progress:
                    progress(len(by_rep), config.replicates)
    records = [r for i in reps for r in by_rep[i]]
    return StudyResult(config, records)
