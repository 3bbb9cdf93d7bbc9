"""Command-line interface.

Commands: ``test-dispersion``, ``mesh``, ``fit``, ``score``, ``predict`` and
``simulate``. Settings come from an optional flat ``key = value`` file
(``--config``) and are overridden by flags. Every run writes
``run_config.txt`` with the effective settings, and all outputs of a run are
staged in temporary files and renamed into place only after every
computation has succeeded.

Exit codes: 0 on success, 2 for bad input (unreadable data, unknown keys,
missing covariates), 3 for numerical failures (mesh generation, Newton or
grid exploration, non-positive-definite matrices).

Prediction heatmaps are ASCII PGM (``P2``) images with ``nx`` columns and
``ny`` rows, north up. A value ``v`` maps to gray ``1 + round(254 (v - lo) /
(hi - lo))`` where ``lo`` and ``hi`` are the smallest and largest predicted
values (both stored in a header comment); cells outside the mesh are gray 0.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import tempfile
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._linalg import NotPositiveDefiniteError
from .count_models import dean_lawless_test, poisson_irls
from .inference import (
    LIKELIHOODS,
    FitResult,
    HyperGrid,
    HyperPoint,
    InferenceError,
    LatentModel,
    PriorSpec,
    fit,
    log_hyper_posterior,
    predict,
)
from .mesh import Mesh, MeshError, build_mesh
from .scoring import PIT_MODES, LOO_METHODS, pit_histogram, score_fit
from .simulator import StudyConfig, run_study

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(ValueError):
    """Malformed data, configuration or flags."""


class StageError(RuntimeError):
    """Numerical failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, err: Exception):
        super().__init__(f"{stage} failed: {err}")
        self.stage = stage


def fmt(v) -> str:
    """Shortest decimal text that parses back to the same double."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "on" if v else "off"
    if isinstance(v, tuple):
        return ",".join(fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_outputs(out_dir, files: dict) -> list:
    """Stage every file in ``out_dir`` and rename them into place together."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
            staged.append((tmp, out_dir / name))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)
    return [dest for _, dest in staged]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def read_key_values(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise InputError(f"cannot read config {path}: {err}") from err
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(raw) -> bool:
    s = str(raw).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise InputError(f"expected on/off, got {raw!r}")


def _parse_floats(raw, n=None) -> tuple:
    try:
        vals = tuple(float(p) for p in str(raw).split(",") if p.strip())
    except ValueError as err:
        raise InputError(f"expected comma-separated numbers, got {raw!r}") from err
    if n is not None and len(vals) != n:
        raise InputError(f"expected {n} comma-separated numbers, got {raw!r}")
    return vals


@dataclass(frozen=True)
class RunConfig:
    """Effective settings of a data-analysis run.

    ``max_edge`` and ``extension`` default to 5% and 15% of the diagonal of
    the data bounding box. ``strategy = auto`` explores a lattice for up to
    two hyperparameters and a central composite design otherwise.
    """

    data: str = ""
    likelihood: str = "gc"
    covariates: tuple | None = None
    standardize: bool = True
    seed: int = 1
    out: str = "gammacount_out"
    max_edge: float | None = None
    extension: float | None = None
    grid: tuple = (50, 50)
    bounds: tuple | None = None
    fit_dir: str = ""
    strategy: str = "auto"
    grid_step: float = 0.75
    grid_drop: float = 6.0
    correction: str = "cavity"
    n_draws: int = 1000
    pit_mode: str = "mid"
    loo: str = "cavity"
    alpha_shape: float = 0.01
    alpha_rate: float = 0.01
    beta_variance: float = 1000.0
    log_tau_mean: float = math.log(0.02)
    log_tau_var: float = 10.0
    log_kappa_mean: float = math.log(14.0)
    log_kappa_var: float = 10.0
    log_size_mean: float = 0.0
    log_size_var: float = 10.0

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise InputError(f"likelihood must be one of {LIKELIHOODS}")
        if self.strategy not in ("auto", "grid", "ccd"):
            raise InputError("strategy must be auto, grid or ccd")
        if self.pit_mode not in PIT_MODES:
            raise InputError(f"pit_mode must be one of {PIT_MODES}")
        if self.loo not in LOO_METHODS:
            raise InputError(f"loo must be one of {LOO_METHODS}")
        if self.correction not in ("none", "cavity"):
            raise InputError("correction must be none or cavity")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise InputError("grid must be two positive integers nx,ny")
        if self.bounds is not None and (len(self.bounds) != 4 or self.bounds[0] >= self.bounds[1]
                                        or self.bounds[2] >= self.bounds[3]):
            raise InputError("bounds must be xmin,xmax,ymin,ymax with xmin < xmax and ymin < ymax")
        for key in ("max_edge", "extension"):
            v = getattr(self, key)
            if v is not None and not (v >= 0 and (key == "extension" or v > 0)):
                raise InputError(f"{key} must be positive")
        if self.n_draws < 2:
            raise InputError("n_draws must be at least 2")

    @classmethod
    def from_sources(cls, file_values: dict | None = None, flags: dict | None = None) -> "RunConfig":
        """Merge config-file strings with flag values (flags win) and parse them."""
        merged = dict(file_values or {})
        merged.update({k: v for k, v in (flags or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise InputError(f"unknown setting(s): {', '.join(unknown)}")
        if merged.get("data"):
            merged["data"] = os.path.abspath(merged["data"])
        kw = {}
        for key, raw in merged.items():
            try:
                kw[key] = _parse_setting(key, raw)
            except ValueError as err:
                raise InputError(f"bad value for {key}: {raw!r}") from err
        return cls(**kw)

    def items(self) -> list:
        return [(f.name, fmt(getattr(self, f.name))) for f in fields(self)]

    @property
    def priors(self) -> PriorSpec:
        return PriorSpec(
            alpha_gamma=(self.alpha_shape, self.alpha_rate),
            beta_variance=self.beta_variance,
            log_tau=(self.log_tau_mean, self.log_tau_var),
            log_kappa=(self.log_kappa_mean, self.log_kappa_var),
            log_size=(self.log_size_mean, self.log_size_var),
        )


_INT_KEYS = {"seed", "n_draws"}
_FLOAT_KEYS = {
    "max_edge", "extension", "grid_step", "grid_drop", "alpha_shape", "alpha_rate", "beta_variance",
    "log_tau_mean", "log_tau_var", "log_kappa_mean", "log_kappa_var", "log_size_mean", "log_size_var",
}


def _parse_setting(key, raw):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    if key in _INT_KEYS:
        return int(s)
    if key in _FLOAT_KEYS:
        return None if s == "" and key in ("max_edge", "extension") else float(s)
    if key == "standardize":
        return _parse_bool(s)
    if key == "covariates":
        return tuple(p.strip() for p in s.split(",") if p.strip()) if s else None
    if key == "grid":
        parts = s.split(",")
        if len(parts) != 2:
            raise InputError("grid must be nx,ny")
        return tuple(int(p) for p in parts)
    if key == "bounds":
        return _parse_floats(s, 4) if s else None
    return s


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Coordinates, counts and named covariate columns."""

    coords: np.ndarray
    y: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    columns: tuple

    @property
    def n(self) -> int:
        return len(self.y)


def _row_list(rows) -> str:
    shown = ", ".join(str(r) for r in rows[:20])
    return shown + (f" (+{len(rows) - 20} more)" if len(rows) > 20 else "")


def load_dataset(path) -> Dataset:
    """Read a CSV whose first three columns are x, y and the count.

    Remaining columns are covariates named by the header. Row numbers in
    error messages are file line numbers (the header is line 1).
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise InputError(f"cannot read data {path}: {err}") from err
    if not rows:
        raise InputError(f"{path}: empty file")
    header = tuple(h.strip() for h in rows[0])
    if len(header) < 3:
        raise InputError(f"{path}: need at least the columns x, y and count")
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column names in header")
    body = [(i, r) for i, r in enumerate(rows[1:], 2) if any(c.strip() for c in r)]
    if not body:
        raise InputError(f"{path}: no data rows")
    missing, bad_num, bad_coord, bad_count = [], [], [], []
    values = np.empty((len(body), len(header)))
    for k, (lineno, r) in enumerate(body):
        cells = [c.strip() for c in r]
        if len(cells) != len(header) or any(c == "" for c in cells):
            missing.append(lineno)
            continue
        try:
            values[k] = [float(c) for c in cells]
        except ValueError:
            bad_num.append(lineno)
            continue
        if not np.all(np.isfinite(values[k])):
            (bad_coord if not np.all(np.isfinite(values[k, :2])) else bad_num).append(lineno)
            continue
        c = values[k, 2]
        if c < 0 or c != math.floor(c):
            bad_count.append(lineno)
    problems = []
    if missing:
        problems.append(f"missing cells in rows {_row_list(missing)}")
    if bad_num:
        problems.append(f"non-numeric or non-finite values in rows {_row_list(bad_num)}")
    if bad_coord:
        problems.append(f"non-finite coordinates in rows {_row_list(bad_coord)}")
    if bad_count:
        problems.append(f"counts that are not non-negative integers in rows {_row_list(bad_count)}")
    if problems:
        raise InputError(f"{path}: " + "; ".join(problems))
    return Dataset(values[:, :2].copy(), values[:, 2].astype(np.int64), values[:, 3:].copy(), header[3:], header)


def design_matrix(ds: Dataset, cfg: RunConfig):
    """Intercept plus the selected covariates, optionally standardized.

    Returns ``(X, names, transforms)`` with ``transforms`` a list of
    ``(name, centre, scale)`` such that ``raw = centre + scale * standardized``.
    """
    names = ds.covariate_names if cfg.covariates is None else cfg.covariates
    absent = [c for c in names if c not in ds.covariate_names]
    if absent:
        raise InputError(f"covariates not in the data: {', '.join(absent)}")
    cols, transforms = [np.ones(ds.n)], []
    for name in names:
        x = ds.covariates[:, ds.covariate_names.index(name)]
        centre, scale = 0.0, 1.0
        if cfg.standardize:
            centre, scale = float(np.mean(x)), float(np.std(x))
            if scale == 0.0:
                raise InputError(f"covariate {name} is constant and cannot be standardized")
        cols.append((x - centre) / scale)
        transforms.append((name, centre, scale))
    return np.column_stack(cols), ("intercept",) + tuple(names), transforms


def mesh_settings(coords, cfg: RunConfig):
    diag = float(np.hypot(*(coords.max(axis=0) - coords.min(axis=0))))
    if diag == 0.0:
        raise InputError("all locations coincide")
    max_edge = cfg.max_edge if cfg.max_edge is not None else 0.05 * diag
    extension = cfg.extension if cfg.extension is not None else 0.15 * diag
    return max_edge, extension


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------


def _stage(name, func, *args, **kw):
    try:
        return func(*args, **kw)
    except InputError:
        raise
    except (InferenceError, NotPositiveDefiniteError, MeshError, np.linalg.LinAlgError, FloatingPointError) as err:
        raise StageError(name, err) from err


def make_mesh(coords, cfg: RunConfig) -> Mesh:
    if len(coords) < 3:
        raise InputError("at least three locations are needed for a mesh")
    max_edge, extension = mesh_settings(coords, cfg)
    return _stage("mesh construction", build_mesh, coords, max_edge, extension)


def make_model(ds: Dataset, cfg: RunConfig, mesh: Mesh):
    X, names, transforms = design_matrix(ds, cfg)
    if ds.n < X.shape[1] + 1:
        raise InputError(f"{ds.n} rows are too few for {X.shape[1]} regression coefficients")
    model = _stage(
        "model setup", LatentModel.build, ds.y, X, ds.coords, mesh,
        likelihood=cfg.likelihood, priors=cfg.priors, covariate_names=names,
    )
    return model, transforms


def _strategy(model, cfg):
    if cfg.strategy != "auto":
        return cfg.strategy
    return "grid" if len(model.hyper_names) <= 2 else "ccd"


def run_fit(model, cfg: RunConfig):
    return _stage(
        "hyperparameter exploration", fit, model, step=cfg.grid_step, drop=cfg.grid_drop,
        correction=cfg.correction, strategy=_strategy(model, cfg),
    )


def summary_rows(fit_result) -> list:
    return [(s.name, s.mean, s.sd, s.q025, s.q975) for s in fit_result.summary()]


def hyper_grid_rows(fit_result):
    grid = fit_result.grid
    header = (*grid.names, "log_posterior", "weight")
    rows = [(*p.theta.tolist(), p.log_posterior, p.weight) for p in grid.points]
    return header, rows


def reload_grid(model, header, rows, correction) -> HyperGrid:
    """Rebuild a grid from ``hyper_grid.csv`` by re-solving the latent mode at each stored theta."""
    names = tuple(header[:-2])
    if names != model.hyper_names:
        raise InputError(f"hyper_grid.csv columns {names} do not match the model {model.hyper_names}")
    points = []
    start = None
    for r in rows:
        theta = np.array(r[:-2], dtype=float)
        _, ga = log_hyper_posterior(model, theta, start, correction)
        start = ga.warm_start
        points.append(HyperPoint(theta, float(r[-2]), float(r[-1]), ga.mode, ga.eta, ga.eta_variance(), start))
    w = np.array([p.weight for p in points])
    if not np.isclose(w.sum(), 1.0, rtol=1e-9):
        raise InputError("hyper_grid.csv weights do not sum to one")
    mode = points[int(np.argmax(w))].theta
    d = len(names)
    return HyperGrid(names, points, mode, np.full((d, d), np.nan), len(points), correction)


def score_rows(report) -> list:
    return [(k, v) for k, v in report.as_rows()]


def prediction_grid(cfg: RunConfig, coords):
    nx, ny = cfg.grid
    if cfg.bounds is None:
        (x0, y0), (x1, y1) = coords.min(axis=0), coords.max(axis=0)
    else:
        x0, x1, y0, y1 = cfg.bounds
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    gx, gy = np.meshgrid(xs, ys)  # row j is y index j
    return np.column_stack([gx.ravel(), gy.ravel()])


def pgm_text(values: np.ndarray, keep: np.ndarray, nx: int, ny: int) -> str:
    """ASCII graymap of ``values`` laid out row-major by (y index, x index), north up."""
    full = np.zeros(nx * ny, dtype=int)
    v = values[keep]
    lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 0.0)
    if v.size:
        full[keep] = 128 if hi == lo else 1 + np.rint(254.0 * (v - lo) / (hi - lo)).astype(int)
    img = full.reshape(ny, nx)[::-1]
    lines = ["P2", f"# lo {fmt(lo)} hi {fmt(hi)}", f"{nx} {ny}", "255"]
    lines += [" ".join(str(g) for g in row) for row in img]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _config_files(cfg: RunConfig, command: str, coords=None) -> dict:
    """``run_config.txt``; mesh sizes derived from the data are written as their effective values."""
    if coords is not None and (cfg.max_edge is None or cfg.extension is None):
        max_edge, extension = mesh_settings(coords, cfg)
        cfg = replace(cfg, max_edge=max_edge, extension=extension)
    text = f"command = {command}\nversion = {__version__}\n" + "".join(f"{k} = {v}\n" for k, v in cfg.items())
    return {"run_config.txt": text}


def _require_data(cfg):
    if not cfg.data:
        raise InputError("--data is required")
    return load_dataset(cfg.data)


def cmd_test_dispersion(cfg: RunConfig, out=None) -> dict:
    out = out or sys.stdout
    ds = _require_data(cfg)
    X, names, _ = design_matrix(ds, cfg)
    if ds.n < X.shape[1] + 1:
        raise InputError(f"insufficient data: {ds.n} row(s) for {X.shape[1]} Poisson coefficients")
    try:
        _, mu = poisson_irls(ds.y, X)
        res = dean_lawless_test(ds.y, mu)
    except (ValueError, np.linalg.LinAlgError) as err:
        raise StageError("Poisson fit", err) from err
    verdict = "over-dispersed" if res.overdispersed else "not over-dispersed"
    rows = [("statistic", res.statistic), ("p_value", res.p_value_one_sided), ("n", ds.n), ("verdict", verdict)]
    files = {"dispersion_test.csv": csv_text(("quantity", "value"), rows), **_config_files(cfg, "test-dispersion")}
    write_outputs(cfg.out, files)
    for k, v in rows:
        print(f"{k}: {fmt(v)}", file=out)
    return files


def cmd_mesh(cfg: RunConfig, out=None) -> dict:
    out = out or sys.stdout
    ds = _require_data(cfg)
    mesh = make_mesh(ds.coords, cfg)
    st = mesh.stats()
    files = {
        "mesh.txt": mesh.to_text(),
        "mesh_stats.csv": csv_text(("quantity", "value"), list(st.items())),
        **_config_files(cfg, "mesh", ds.coords),
    }
    write_outputs(cfg.out, files)
    for k, v in st.items():
        print(f"{k}: {fmt(v)}", file=out)
    return files


def _fit_files(cfg, fit_result, transforms, mesh, report):
    header, rows = hyper_grid_rows(fit_result)
    return {
        "fit_summary.csv": csv_text(("parameter", "mean", "sd", "q0.025", "q0.975"), summary_rows(fit_result)),
        "scores.csv": csv_text(("criterion", "value"), score_rows(report)),
        "hyper_grid.csv": csv_text(header, rows),
        "covariate_transforms.csv": csv_text(("covariate", "centre", "scale"), transforms),
        "mesh.txt": mesh.to_text(),
    }


def _fit_pipeline(cfg):
    ds = _require_data(cfg)
    mesh = make_mesh(ds.coords, cfg)
    model, transforms = make_model(ds, cfg, mesh)
    fr = run_fit(model, cfg)
    report = _stage("scoring", score_fit, fr, n_draws=cfg.n_draws, rng=np.random.default_rng(cfg.seed),
                    pit_mode=cfg.pit_mode, loo=cfg.loo)
    return ds, mesh, model, transforms, fr, report


def cmd_fit(cfg: RunConfig, out=None) -> dict:
    out = out or sys.stdout
    ds, mesh, _, transforms, fr, report = _fit_pipeline(cfg)
    files = {**_fit_files(cfg, fr, transforms, mesh, report), **_config_files(cfg, "fit", ds.coords)}
    write_outputs(cfg.out, files)
    out.write(files["fit_summary.csv"])
    out.write(files["scores.csv"])
    return files


def cmd_score(cfg: RunConfig, out=None) -> dict:
    out = out or sys.stdout
    ds, mesh, _, transforms, fr, report = _fit_pipeline(cfg)
    obs = [(i, int(ds.y[i]), report.cpo[i], report.pit[i]) for i in range(ds.n)]
    edges, counts = pit_histogram(report.pit[np.isfinite(report.pit)])
    hist = [(edges[b], edges[b + 1], int(counts[b])) for b in range(len(counts))]
    files = {
        **_fit_files(cfg, fr, transforms, mesh, report),
        "observation_scores.csv": csv_text(("row", "y", "cpo", "pit"), obs),
        "pit_hist.csv": csv_text(("bin_lo", "bin_hi", "count"), hist),
        **_config_files(cfg, "score", ds.coords),
    }
    write_outputs(cfg.out, files)
    out.write(files["scores.csv"])
    return files


def _read_csv(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from err
    if not rows:
        raise InputError(f"{path}: empty file")
    return rows[0], rows[1:]


def load_fit(cfg: RunConfig):
    """Rebuild a fitted model from a ``fit`` output directory.

    Settings come from its ``run_config.txt`` (the current data path and
    grid flags still apply); the mesh and hyperparameter grid are read back
    and only the latent modes are recomputed.
    """
    fit_dir = Path(cfg.fit_dir)
    saved = read_key_values(fit_dir / "run_config.txt")
    saved.pop("command", None)
    saved.pop("version", None)
    keep = {k: v for k, v in saved.items() if k not in ("grid", "bounds", "out", "fit_dir")}
    if cfg.data:
        keep["data"] = cfg.data
    fit_cfg = RunConfig.from_sources(keep)
    ds = load_dataset(fit_cfg.data)
    try:
        mesh = Mesh.load(fit_dir / "mesh.txt")
    except OSError as err:
        raise InputError(f"cannot read mesh: {err}") from err
    model, transforms = make_model(ds, fit_cfg, mesh)
    header, rows = _read_csv(fit_dir / "hyper_grid.csv")
    grid = _stage("refit at stored grid", reload_grid, model, header, rows, fit_cfg.correction)
    means = np.array([p.latent_mode for p in grid.points])
    return ds, model, FitResult(model, grid, np.tensordot(grid.weights, means, axes=1))


def cmd_predict(cfg: RunConfig, out=None, err=None) -> dict:
    out = out or sys.stdout
    err = err or sys.stderr
    if cfg.fit_dir:
        ds, model, fr = load_fit(cfg)
    else:
        ds = _require_data(cfg)
        mesh = make_mesh(ds.coords, cfg)
        model, _ = make_model(ds, cfg, mesh)
        fr = run_fit(model, cfg)
    nx, ny = cfg.grid
    pts = prediction_grid(cfg, ds.coords)
    keep = model.mesh.contains(pts)
    dropped = np.flatnonzero(~keep)
    if dropped.size:
        cells = [f"({i % nx},{i // nx})" for i in dropped]
        shown = " ".join(cells[:50]) + (f" (+{len(cells) - 50} more)" if len(cells) > 50 else "")
        print(f"warning: {dropped.size} grid cell(s) outside the mesh dropped (ix,iy): {shown}", file=err)
    if not keep.any():
        raise InputError("no prediction cell lies inside the mesh")
    # covariates held at their sample mean
    xbar = np.mean(model.X, axis=0)
    sel = pts[keep]
    mean, sd = _stage("prediction", predict, model, fr, sel, np.tile(xbar, (len(sel), 1)))
    full_mean = np.full(len(pts), np.nan)
    full_sd = np.full(len(pts), np.nan)
    full_mean[keep], full_sd[keep] = mean, sd
    files = {
        "pred_mean.csv": csv_text(("x", "y", "value"), [(*sel[i], mean[i]) for i in range(len(sel))]),
        "pred_sd.csv": csv_text(("x", "y", "value"), [(*sel[i], sd[i]) for i in range(len(sel))]),
        "pred_mean.pgm": pgm_text(full_mean, keep, nx, ny),
        "pred_sd.pgm": pgm_text(full_sd, keep, nx, ny),
        **_config_files(cfg, "predict", None if cfg.fit_dir else ds.coords),
    }
    write_outputs(cfg.out, files)
    print(f"predicted {keep.sum()} of {len(pts)} cells", file=out)
    return files


def cmd_simulate(config_values: dict, flags: dict, out_dir, err=None) -> dict:
    err = err or sys.stderr
    values = dict(config_values)
    for key in ("seed", "max_edge", "extension"):
        if flags.get(key) is not None:
            values[key] = flags[key]
    try:
        study = StudyConfig.from_mapping(values)
    except (TypeError, ValueError) as e:
        raise InputError(str(e)) from e

    def progress(done, total):
        print(f"replicate {done}/{total}", file=err, flush=True)

    result = run_study(study, progress=progress)
    files = dict(result.tables())
    text = "command = simulate\n" + f"version = {__version__}\n" + "".join(f"{k} = {v}\n" for k, v in study.items())
    files["run_config.txt"] = text
    write_outputs(out_dir, files)
    failed = sum(1 for r in result.records if r["status"] != "ok")
    print(f"{len(result.records)} fits, {failed} failed", file=err)
    return files


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

COMMANDS = ("test-dispersion", "mesh", "fit", "score", "predict", "simulate")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="CSV with columns x, y, count, covariates...")
    common.add_argument("--config", help="flat key = value settings file (flags override it)")
    common.add_argument("--likelihood", choices=LIKELIHOODS)
    common.add_argument("--covariates", help="comma-separated covariate columns (default: all)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--max-edge", type=float, dest="max_edge")
    common.add_argument("--extension", type=float)
    common.add_argument("--grid", help="prediction grid size nx,ny")
    common.add_argument("--standardize", choices=("on", "off"))
    common.add_argument("--fit", dest="fit_dir", help="output directory of an earlier fit (predict)")
    parser = argparse.ArgumentParser(prog="gammacount", description="Spatial gamma-count regression.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "test-dispersion": "Dean-Lawless over-dispersion test after a Poisson GLM fit",
        "mesh": "build a triangulation over the data locations",
        "fit": "fit the spatial count model and write summaries",
        "score": "fit and write per-observation CPO and PIT",
        "predict": "posterior mean and sd rasters of the linear predictor",
        "simulate": "run the simulation study",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


FLAG_KEYS = ("data", "likelihood", "covariates", "seed", "out", "max_edge", "extension", "grid", "standardize",
             "fit_dir")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: getattr(args, k) for k in FLAG_KEYS}
    try:
        file_values = read_key_values(args.config) if args.config else {}
        if args.command == "simulate":
            out_dir = flags["out"] or file_values.pop("out", None) or "gammacount_out"
            file_values.pop("out", None)
            cmd_simulate(file_values, flags, out_dir)
            return EXIT_OK
        cfg = RunConfig.from_sources(file_values, flags)
        {
            "test-dispersion": cmd_test_dispersion,
            "mesh": cmd_mesh,
            "fit": cmd_fit,
            "score": cmd_score,
            "predict": cmd_predict,
        }[args.command](cfg)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InferenceError, NotPositiveDefiniteError, MeshError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
