"""Seeded scaling sweeps over T, n and H, CSV output, log-log slope fits and SVG plots."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, field, fields
import io
import json
import math
import os
from pathlib import Path
import time

import numpy as np

from .analysis import error_report, evaluate
from .data import DatasetBundle, collect, collect_bundle, derive_seed
from .features import FeatureMap, build_encoder_class
from .fqi import SolverConfig, fit_downstream, run_mtfqi
from .mdp import EnsembleSpec, generate_ensemble

__all__ = [
    "CSV_COLUMNS",
    "CONFIG_SCHEMA_VERSION",
    "ExperimentConfig",
    "SlopeFit",
    "SweepRow",
    "TransferResult",
    "emit_plot",
    "fit_loglog_slope",
    "read_csv",
    "run_cell",
    "run_sweep",
    "run_transfer",
    "write_csv",
]

CONFIG_SCHEMA_VERSION = 1
AXES = ("T", "n", "H")


@dataclass
class ExperimentConfig:
    """One sweep: ``sweep_axis`` takes each of ``values``; other parameters stay fixed.

    ``w_max=None`` leaves rewards unscaled (no decoder-norm budget).
    """

    sweep_axis: str
    values: list
    seeds: list = field(default_factory=lambda: list(range(30)))
    S: int = 5
    K: int = 3
    d: int = 4
    T: int = 5
    n: int = 200
    H: int = 5
    gamma: float = 1.0
    num_encoders: int = 8
    corruption: float = 1.0
    behavior: str = "uniform"
    delta: float = 0.05
    mode: str = "per-stage"
    w_max: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.sweep_axis not in AXES:
            raise ValueError(f"sweep_axis must be one of {AXES}")
        self.values = [int(v) for v in self.values]
        if len(self.values) < 2 or any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("sweep values must be strictly increasing with at least two entries")
        if len(self.seeds) < 5:
            raise ValueError("at least 5 seeds are required for slope fits")
        if self.num_encoders < 1:
            raise ValueError("num_encoders must be >= 1")

    def params(self, value) -> dict:
        p = {k: getattr(self, k) for k in ("S", "K", "d", "T", "n", "H")}
        p[self.sweep_axis] = int(value)
        return p

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"config schema_version {version!r} is not supported (expected {CONFIG_SCHEMA_VERSION})"
            )
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in known})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"schema_version": CONFIG_SCHEMA_VERSION, **asdict(self)}


@dataclass
class SweepRow:
    axis: str
    value: int
    seed: int
    status: str = "ok"
    d1_opt: float = math.nan
    d1_opt_sq: float = math.nan
    d1_behavior: float = math.nan
    behavior_sq_max: float = math.nan
    stage_h_mse: float = math.nan
    theorem1a: float = math.nan
    theorem1c: float = math.nan
    lambda_max: float = math.nan
    error: str = ""
    wall_ms: float = 0.0


# wall_ms goes to a sidecar file so the main CSV is reproducible byte for byte
CSV_COLUMNS = [f.name for f in fields(SweepRow) if f.name != "wall_ms"]


def _build(p: dict, seed: int, gamma, w_max, num_encoders, corruption):
    w_max = math.inf if w_max is None else w_max
    spec = EnsembleSpec(p["S"], p["K"], p["H"], p["T"], p["d"], gamma, w_max)
    ensemble = generate_ensemble(spec, derive_seed(seed, 0))
    truth = FeatureMap(ensemble.features, p["K"], "truth")
    encoders = build_encoder_class(truth, num_encoders - 1, corruption, derive_seed(seed, 1))
    return ensemble, encoders


def run_cell(config: ExperimentConfig, value: int, seed: int) -> SweepRow:
    """Generate, collect, train and evaluate one ``(axis value, seed)`` cell."""
    start = time.perf_counter()
    row = SweepRow(config.sweep_axis, int(value), int(seed))
    try:
        p = config.params(value)
        ensemble, encoders = _build(p, seed, config.gamma, config.w_max, config.num_encoders, config.corruption)
        bundle = collect_bundle(ensemble, config.behavior, p["n"], derive_seed(seed, 2))
        model, report = run_mtfqi(bundle, encoders, SolverConfig(gamma=config.gamma, mode=config.mode))
        result = evaluate(model, ensemble, bundle, report, encoders, config.delta, seed=derive_seed(seed, 3))
        opt, beh = result["errors"]["optimal"], result["errors"]["behavior"]
        row.d1_opt = opt["delta"][0]
        row.d1_opt_sq = opt["delta"][0] ** 2
        row.d1_behavior = beh["delta"][0]
        row.behavior_sq_max = max(beh["mean_squared"])
        row.stage_h_mse = opt["mean_squared"][-1]
        row.theorem1a = result["bounds"]["theorem1a"]
        row.theorem1c = result["bounds"]["theorem1c"]
        row.lambda_max = result["lambda_max"]
    except Exception as exc:  # a failed cell must not abort the sweep
        row.status = "error"
        row.error = f"{type(exc).__name__}: {exc}"
    row.wall_ms = (time.perf_counter() - start) * 1e3
    return row


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(config: ExperimentConfig, out_dir=None) -> list:
    """Run every ``(value, seed)`` cell; rows come back in ``(value, seed)`` order.

    With ``out_dir`` the rows are written to ``<name>.csv`` (plus a
    ``<name>.timing.csv`` sidecar). ``MTFQI_THREADS`` sets the number of
    worker processes (default 1).
    """
    paths = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        name = config.name or f"sweep_{config.sweep_axis}"
        paths = (out_dir / f"{name}.csv", out_dir / f"{name}.timing.csv")
        for p in paths:
            try:
                p.touch()
            except OSError as exc:
                raise OSError(f"cannot write sweep output {p}: {exc}") from None
    jobs = [(config, v, s) for v in config.values for s in config.seeds]
    workers = int(os.environ.get("MTFQI_THREADS", "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_args, jobs, chunksize=4))
    else:
        rows = [run_cell(*job) for job in jobs]
    if paths is not None:
        write_csv(rows, paths[0])
        with open(paths[1], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "value", "seed", "wall_ms"])
            for r in rows:
                w.writerow([r.axis, r.value, r.seed, f"{r.wall_ms:.3f}"])
    return rows


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list:
    """Rows of a sweep CSV as dicts; numeric fields are parsed, blanks become NaN."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k in ("axis", "status", "error"):
                    row[k] = v
                elif k in ("value", "seed"):
                    row[k] = int(v)
                else:
                    row[k] = float(v) if v != "" else math.nan
            rows.append(row)
    return rows, reader.fieldnames or []


def _get(row, key):
    return row[key] if isinstance(row, dict) else getattr(row, key)


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    excluded: int
    x: np.ndarray
    y: np.ndarray


def fit_loglog_slope(rows, response: str = "d1_opt_sq") -> SlopeFit:
    """OLS of log(mean response over seeds) on log(axis value).

    Error rows and non-positive responses are dropped before averaging;
    their number is reported as ``excluded``.
    """
    by_value = {}
    excluded = 0
    for r in rows:
        y = _get(r, response)
        status = r.get("status", "ok") if isinstance(r, dict) else getattr(r, "status", "ok")
        if status != "ok" or not math.isfinite(y) or y <= 0:
            excluded += 1
            continue
        by_value.setdefault(float(_get(r, "value")), []).append(float(y))
    if not by_value:
        raise ValueError(f"no positive values of {response!r} to fit")
    if len(by_value) < 2:
        raise ValueError("need at least two distinct axis values")
    x = np.array(sorted(by_value))
    y = np.array([np.mean(by_value[v]) for v in x])
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), r2, excluded, x, y)


def emit_plot(csv_path, axis: str, response: str, out_path) -> Path:
    """Log-log SVG of per-seed points, their mean, the fitted slope and the theorem1c curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, columns = read_csv(csv_path)
    for col in ("value", "status", response):
        if col not in columns:
            raise KeyError(f"column {col!r} not found in {csv_path}")
    rows = [r for r in rows if r.get("axis", axis) == axis and r["status"] == "ok"
            and math.isfinite(r[response]) and r[response] > 0]
    if not rows:
        raise ValueError(f"no plottable rows for axis {axis!r} and response {response!r}")
    fit = fit_loglog_slope(rows, response) if len({r["value"] for r in rows}) >= 2 else None

    x = np.array([r["value"] for r in rows], dtype=float)
    y = np.array([r[response] for r in rows])
    xs = np.array(sorted(set(x)))
    means = np.array([y[x == v].mean() for v in xs])

    with plt.rc_context({"svg.hashsalt": "mtfqi", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.scatter(x, y, s=12, alpha=0.5, color="tab:blue", label="per seed", gid="seed-points")
        ax.plot(xs, means, "-", color="tab:red", lw=2, label="mean over seeds", gid="mean-line")
        if "theorem1c" in columns:
            bound = np.array([np.nanmean([r["theorem1c"] for r in rows if r["value"] == v]) for v in xs])
            if np.all(np.isfinite(bound) & (bound > 0)):
                ax.plot(xs, bound, "--", color="gray", label="theorem1c bound (unit constants)",
                        gid="theorem1c-curve")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel(axis)
        ax.set_ylabel(response)
        if fit is not None:
            ax.set_title(f"log-log slope {fit.slope:.3f} (r$^2$ = {fit.r2:.3f})")
        ax.legend(fontsize=8)
        fig.tight_layout()
        out_path = Path(out_path)
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path


@dataclass
class TransferResult:
    """Paired downstream (frozen upstream encoder) vs scratch errors, one entry per seed."""

    downstream: np.ndarray
    scratch: np.ndarray

    def summary(self) -> dict:
        diff = self.downstream - self.scratch
        m = len(diff)
        return {
            "seeds": m,
            "downstream_mean": float(self.downstream.mean()),
            "downstream_se": float(self.downstream.std(ddof=1) / math.sqrt(m)),
            "scratch_mean": float(self.scratch.mean()),
            "scratch_se": float(self.scratch.std(ddof=1) / math.sqrt(m)),
            "paired_diff_mean": float(diff.mean()),
            "paired_diff_se": float(diff.std(ddof=1) / math.sqrt(m)),
        }


def run_transfer(
    seeds, upstream_T: int = 8, upstream_n: int = 500, downstream_n: int = 50,
    S: int = 5, K: int = 3, d: int = 4, H: int = 5, num_encoders: int = 8,
    corruption: float = 1.0, behavior: str = "uniform", gamma: float = 1.0, w_max: float | None = None,
) -> TransferResult:
    """Downstream decoder fit on the upstream encoder vs single-task training from scratch.

    The ensemble has ``upstream_T + 1`` tasks; the last one is the new task.
    Both arms see the same downstream dataset and are scored by stage-1
    L2(mu_b) error against the new task's optimal Q.
    """
    down, scratch = [], []
    solver = SolverConfig(gamma=gamma)
    for seed in seeds:
        p = {"S": S, "K": K, "d": d, "H": H, "T": upstream_T + 1}
        ensemble, encoders = _build(p, seed, gamma, w_max, num_encoders, corruption)
        new = upstream_T
        upstream = collect_bundle(ensemble, behavior, upstream_n, derive_seed(seed, 2), tasks=range(upstream_T))
        model, _ = run_mtfqi(upstream, encoders, solver)
        target = collect(ensemble, new, behavior, downstream_n, derive_seed(seed, 4))
        target_bundle = DatasetBundle([target], downstream_n, H, derive_seed(seed, 4))
        frozen, _ = fit_downstream(model, target, solver)
        fresh, _ = run_mtfqi(target_bundle, encoders, solver)
        down.append(error_report(frozen, ensemble, target_bundle).delta[0])
        scratch.append(error_report(fresh, ensemble, target_bundle).delta[0])
    return TransferResult(np.array(down), np.array(scratch))
