"""Experiment driver: scene sets, solver jobs, sweeps, quality-vs-time tables
and run manifests.

Every verb writes its CSVs plus ``manifest.json`` into one output directory.
Wall-clock numbers go to ``timing*.csv`` files only, so every other output
is a pure function of the config and seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classical import AdmmConfig, admm_tv_reconstruct, wiener_reconstruct
from .config import (SOLVER_PARAMS, ExperimentConfig, build_operator, build_pinv, build_prior,
                     build_schedule)
from .distill import load_student, operator_fingerprint, student_forward
from .errors import ConfigError, NumericError
from .guidance import DdnmConfig, DpsConfig, ddnm_reconstruct, dps_reconstruct
from .metrics import compute_metrics, format_value
from .scenes import simulate_capture, synth_scenes
from .tensor_io import SeededRng, write_tensor

METRIC_COLUMNS = ("mse", "psnr", "ssim", "residual")
# reserved for perceptual scores appended by full-scale runs
PERCEPTUAL_COLUMN = "perceptual"


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format (sha1 of ``blob <len>\\0`` + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_path(path) -> str:
    """Blob hash of a file, or a tree-style hash over a directory's files."""
    path = Path(path)
    if path.is_file():
        return git_blob_hash(path.read_bytes())
    lines = [f"{p.relative_to(path).as_posix()} {git_blob_hash(p.read_bytes())}"
             for p in sorted(path.rglob("*")) if p.is_file()]
    return git_blob_hash("\n".join(lines).encode())


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def write_manifest(out_dir, cfg: ExperimentConfig, verb: str, inputs: dict | None = None,
                   extra: dict | None = None) -> Path:
    """Config, seeds and content hashes of inputs and (non-timing) outputs."""
    out_dir = Path(out_dir)
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        rel = p.relative_to(out_dir).as_posix()
        if p.is_file() and rel != "manifest.json" and not p.name.startswith("timing"):
            outputs[rel] = git_blob_hash(p.read_bytes())
    manifest = {
        "verb": verb,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {k: hash_path(v) for k, v in sorted((inputs or {}).items())},
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# problem set --------------------------------------------------------------------


@dataclass
class SceneSet:
    ids: list
    scenes: np.ndarray
    ys: np.ndarray


def scene_set(cfg: ExperimentConfig, op, n: int | None = None, label: str = "scenes",
              sigma_n: float | None = None) -> SceneSet:
    root = SeededRng(cfg.seed)
    n = cfg.scenes.n if n is None else n
    sigma_n = cfg.sigma_n if sigma_n is None else sigma_n
    scenes = synth_scenes(cfg.scenes.kind, n, root.child(label), cfg.dims, density=cfg.scenes.density)
    ids = [f"img{i:05d}" for i in range(n)]
    ys = np.stack([simulate_capture(op, x, sigma_n, root.child(f"{label}/noise/{i}"))
                   for i, x in zip(ids, scenes)])
    return SceneSet(ids, scenes, ys)


class SolverContext:
    """Operator, pseudo-inverse, schedule and prior for one config, built lazily."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.op = build_operator(cfg)
        self.pinv = build_pinv(cfg, self.op)
        self.sched = build_schedule(cfg)
        self._prior = None
        self._students = {}

    @property
    def prior(self):
        if self._prior is None:
            self._prior = build_prior(self.cfg)
        return self._prior

    def student(self, path):
        if path is None:
            raise ConfigError("student solver needs params.path (a checkpoint from `distill train`)")
        path = self.cfg.resolve(path)
        if path not in self._students:
            if not (path / "student.json").exists():
                raise ConfigError(f"no student checkpoint at {path}")
            op_file = path / "operator.json"
            if op_file.exists():
                got = operator_fingerprint(self.op, self.pinv)
                if json.loads(op_file.read_text()) != json.loads(json.dumps(got)):
                    raise ConfigError(f"student at {path} was trained for a different operator / pseudo-inverse")
            self._students[path] = load_student(path)
        return self._students[path]


def make_solver(ctx: SolverContext, name: str, params: dict):
    """Return ``fn(y, rng) -> x`` for a named solver with fully resolved params."""
    if name not in SOLVER_PARAMS:
        raise ConfigError(f"unknown solver {name!r}")
    bad = sorted(set(params) - set(SOLVER_PARAMS[name]))
    if bad:
        raise ConfigError(f"solver {name} has no parameter(s) {', '.join(bad)}")
    p = dict(SOLVER_PARAMS[name])
    p.update(params)
    op, pinv, sched = ctx.op, ctx.pinv, ctx.sched
    if name == "wiener":
        return lambda y, rng: wiener_reconstruct(op, y, float(p["lambda_w"]))
    if name == "admm":
        acfg = AdmmConfig(tau=float(p["tau"]), rho=float(p["rho"]), iters=int(p["iters"]))
        return lambda y, rng: admm_tv_reconstruct(op, y, acfg)[0]
    if name == "dps":
        dcfg = DpsConfig(zeta=float(p["zeta"]), stop_gradient=bool(p["stop_gradient"]))
        prior = ctx.prior
        return lambda y, rng: dps_reconstruct(op, y, prior, sched, dcfg, rng)[0]
    if name in ("ddnm", "ddnm+"):
        if name == "ddnm":
            ncfg = DdnmConfig(pinv, mode="exact")
        else:
            ncfg = DdnmConfig(pinv, sigma_y=float(p["sigma_y"]), sigma_y_scale=p["sigma_y_scale"])
        prior = ctx.prior
        return lambda y, rng: ddnm_reconstruct(op, y, prior, sched, ncfg, rng)[0]
    model = ctx.student(p["path"])
    return lambda y, rng: student_forward(model, op, pinv, y)[0]


def params_key(params: dict) -> str:
    return json.dumps(params, sort_keys=True, separators=(",", ":"))


def job_rng(cfg: ExperimentConfig, solver: str, image_id: str) -> SeededRng:
    # shared across grid points: sweeps use common random numbers
    return SeededRng(cfg.seed).child(f"solve/{solver}/{image_id}")


def run_jobs(ctx: SolverContext, data: SceneSet, solver: str, params: dict, clock=time.perf_counter,
             on_result=None):
    """Solve every image; returns (metric records, seconds).

    Only the solver call sits inside the timed region; ``on_result`` (used
    for writing reconstructions) runs after the clock stops.
    """
    fn = make_solver(ctx, solver, params)
    records, seconds = [], []
    for image_id, x_ref, y in zip(data.ids, data.scenes, data.ys):
        rng = job_rng(ctx.cfg, solver, image_id)
        t0 = clock()
        x = fn(y, rng)
        seconds.append(clock() - t0)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"solver {solver} produced non-finite output on {image_id}")
        records.append(compute_metrics(x, x_ref, ctx.op, y))
        if on_result is not None:
            on_result(image_id, x)
    return records, seconds


def _metric_row(rec, metrics):
    return [rec[m] if m in metrics else "" for m in METRIC_COLUMNS] + [""]


def _mean_metrics(records) -> dict:
    return {m: float(np.mean([r[m] for r in records])) for m in METRIC_COLUMNS}


# verbs --------------------------------------------------------------------------


def run_reconstruct(cfg: ExperimentConfig, out_dir, clock=time.perf_counter, save_images: bool = True,
                    data: SceneSet | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = SolverContext(cfg)
    if data is None:
        data = scene_set(cfg, ctx.op)
    rows, timing = [], []
    results = {}
    for spec in cfg.solvers:
        params = spec.resolved()
        rdir = out / "recon" / spec.name

        def save(image_id, x, rdir=rdir):
            if save_images:
                rdir.mkdir(parents=True, exist_ok=True)
                write_tensor(rdir / f"{image_id}.tensor", x)

        recs, secs = run_jobs(ctx, data, spec.name, params, clock=clock, on_result=save)
        results[spec.name] = (recs, secs)
        for image_id, r, s in zip(data.ids, recs, secs):
            rows.append([image_id, spec.name, params_key(params)] + _metric_row(r, cfg.metrics))
            timing.append([image_id, spec.name, params_key(params), s])
    write_csv(out / "metrics.csv", ["image_id", "solver", "params", *METRIC_COLUMNS, PERCEPTUAL_COLUMN], rows)
    write_csv(out / "timing.csv", ["image_id", "solver", "params", "seconds"], timing)
    write_manifest(out, cfg, "reconstruct", _prior_inputs(cfg))
    return results


def run_sweep(cfg: ExperimentConfig, out_dir, solver: str | None = None, param: str | None = None,
              grid=None, clock=time.perf_counter) -> list:
    """One record per (image, grid value) plus a mean row per grid value.

    Returns the summary rows ``(value, mean mse, psnr, ssim, residual)``.
    """
    solver = solver or cfg.sweep.solver
    param = param or cfg.sweep.param
    grid = list(cfg.sweep.grid if grid is None else grid)
    if solver not in SOLVER_PARAMS:
        raise ConfigError(f"unknown sweep solver {solver!r}")
    if param not in SOLVER_PARAMS[solver]:
        raise ConfigError(f"solver {solver} has no parameter {param!r}")
    if not grid:
        raise ConfigError("sweep grid is empty")
    base = next((s.resolved() for s in cfg.solvers if s.name == solver), dict(SOLVER_PARAMS[solver]))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = SolverContext(cfg)
    data = scene_set(cfg, ctx.op)
    rows, timing, summary = [], [], []
    for value in grid:
        params = dict(base, **{param: value})
        recs, secs = run_jobs(ctx, data, solver, params, clock=clock)
        for image_id, r, s in zip(data.ids, recs, secs):
            rows.append([image_id, solver, param, value] + _metric_row(r, cfg.metrics))
            timing.append([image_id, solver, param, value, s])
        mean = _mean_metrics(recs)
        summary.append([value] + [mean[m] for m in METRIC_COLUMNS])
    write_csv(out / "sweep.csv", ["image_id", "solver", "param", "value", *METRIC_COLUMNS, PERCEPTUAL_COLUMN], rows)
    write_csv(out / "sweep_summary.csv", ["value", *(f"mean_{m}" for m in METRIC_COLUMNS)], summary)
    write_csv(out / "timing_sweep.csv", ["image_id", "solver", "param", "value", "seconds"], timing)
    write_manifest(out, cfg, "sweep", _prior_inputs(cfg), {"sweep": {"solver": solver, "param": param,
                                                                      "grid": grid}})
    return summary


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def ordering_checks(quality: dict, seconds: dict) -> list[Check]:
    """Ordinal speed and quality checks over whichever solvers are present.

    ``quality`` maps solver -> mean MSE to reference, ``seconds`` maps
    solver -> median per-image seconds.
    """
    checks = []
    if len(seconds) < 2:
        return checks
    names = sorted(seconds, key=seconds.get)
    detail = ", ".join(f"{n}={seconds[n]:.3g}s" for n in names)
    if "wiener" in seconds:
        checks.append(Check("wiener fastest", names[0] == "wiener", detail))
    if "student" in seconds:
        others = [n for n in seconds if n not in ("wiener", "student")]
        ok = all(seconds["student"] < seconds[n] for n in others)
        checks.append(Check("student second fastest", ok, detail))
        if "ddnm+" in seconds:
            ratio = seconds["ddnm+"] / seconds["student"]
            checks.append(Check("teacher >= 10x slower than student", ratio >= 10, f"ratio={ratio:.1f}"))
    if "dps" in seconds:
        checks.append(Check("dps slowest", names[-1] == "dps", detail))
    order = [n for n in ("ddnm+", "student", "dps") if n in quality]
    if len(order) >= 2:
        ok = all(quality[a] <= quality[b] for a, b in zip(order, order[1:]))
        checks.append(Check("mse " + " <= ".join(order), ok,
                            ", ".join(f"{n}={quality[n]:.5g}" for n in order)))
    return checks


def run_quality_vs_time(cfg: ExperimentConfig, out_dir, check: bool = False, clock=time.perf_counter):
    """Per-solver mean metrics (quality_vs_time.csv) and latencies (timing_quality_vs_time.csv).

    Returns (rows, checks); ``checks`` is empty unless ``check`` is set.
    """
    if not cfg.solvers:
        raise ConfigError("quality-vs-time needs at least one solver")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = SolverContext(cfg)
    data = scene_set(cfg, ctx.op)
    rows, timing, quality, seconds = [], [], {}, {}
    for spec in cfg.solvers:
        recs, secs = run_jobs(ctx, data, spec.name, spec.resolved(), clock=clock)
        mean = _mean_metrics(recs)
        quality[spec.name] = mean["mse"]
        seconds[spec.name] = float(np.median(secs))
        rows.append([spec.name, params_key(spec.resolved())] + [mean[m] for m in METRIC_COLUMNS] + [""])
        timing.append([spec.name, float(np.mean(secs)), float(np.median(secs))])
    write_csv(out / "quality_vs_time.csv",
              ["solver", "params", *(f"mean_{m}" for m in METRIC_COLUMNS), PERCEPTUAL_COLUMN], rows)
    write_csv(out / "timing_quality_vs_time.csv", ["solver", "mean_seconds", "median_seconds"], timing)
    checks = ordering_checks(quality, seconds) if check else []
    if checks:
        write_csv(out / "timing_checks.csv", ["check", "passed", "detail"],
                  [[c.name, c.passed, c.detail] for c in checks])
    inputs = _prior_inputs(cfg)
    for spec in cfg.solvers:
        if spec.name == "student" and spec.params.get("path"):
            inputs["student"] = cfg.resolve(spec.params["path"])
    write_manifest(out, cfg, "bench", inputs)
    return rows, checks


def _prior_inputs(cfg: ExperimentConfig) -> dict:
    if cfg.prior.kind == "learned":
        return {"prior": cfg.resolve(cfg.prior.path)}
    return {}
