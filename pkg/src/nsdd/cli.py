"""Command-line entry point: ``nsdd <verb> --config exp.yaml --out DIR``.

Exit codes: 0 ok, 1 failed check or unexpected error, 2 configuration
error, 3 numeric error, 4 stale teacher cache.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .bench import SceneSet, SolverContext, scene_set, write_csv, write_manifest
from .config import SolverSpec, build_prior, load_config
from .diffusion import denoiser_network, save_denoiser, train_denoiser
from .distill import (TeacherConfig, build_teacher_cache, is_test_item, load_cache, load_student,
                      make_student, operator_fingerprint, save_student, student_infer_batch, train_student)
from .errors import ConfigError, NsddError
from .metrics import compute_metrics
from .micro_net import AdamState
from .scenes import synth_scenes
from .tensor_io import SeededRng, derive_seed, ppm_export, read_tensor, write_tensor

log = logging.getLogger("nsdd")


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_dir(path: Path) -> dict:
    if not path.is_dir():
        raise ConfigError(f"{path} is not a directory")
    return {p.stem: read_tensor(p) for p in sorted(path.glob("*.tensor"))}


# verbs --------------------------------------------------------------------------


def cmd_simulate(args, cfg):
    out = _out(args, cfg)
    ctx = SolverContext(cfg)
    data = scene_set(cfg, ctx.op)
    write_tensor(out / "psf.tensor", ctx.op.kernel)
    for sub in ("scenes", "measurements", "preview"):
        (out / sub).mkdir(exist_ok=True)
    for image_id, x, y in zip(data.ids, data.scenes, data.ys):
        write_tensor(out / "scenes" / f"{image_id}.tensor", x)
        write_tensor(out / "measurements" / f"{image_id}.tensor", y)
        ext = "pgm" if cfg.dims[2] == 1 else "ppm"
        if cfg.dims[2] in (1, 3):
            ppm_export(x, out / "preview" / f"{image_id}_scene.{ext}")
            ppm_export(y / max(float(y.max()), 1e-12), out / "preview" / f"{image_id}_measurement.{ext}")
    write_manifest(out, cfg, "simulate")
    print(f"wrote {len(data.ids)} scenes and measurements to {out}")


def _load_input(path: Path) -> SceneSet:
    scenes, ys = _read_dir(path / "scenes"), _read_dir(path / "measurements")
    ids = sorted(set(scenes) & set(ys))
    if not ids:
        raise ConfigError(f"no matching scenes/measurements under {path}")
    return SceneSet(ids, np.stack([scenes[i] for i in ids]).astype(float), np.stack([ys[i] for i in ids]).astype(float))


def _solver_override(args, cfg):
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, T=args.steps)
    if args.solver is None:
        return cfg
    params = {}
    if args.sigma_y is not None:
        params["sigma_y"] = args.sigma_y
    if args.zeta is not None:
        params["zeta"] = args.zeta
    if args.student is not None:
        params["path"] = str(Path(args.student).resolve())
    base = next((s.params for s in cfg.solvers if s.name == args.solver), {})
    spec = SolverSpec(args.solver, {**base, **params})
    from .config import _solver
    return dataclasses.replace(cfg, solvers=(_solver(dataclasses.asdict(spec), "command line"),))


def cmd_reconstruct(args, cfg):
    cfg = _solver_override(args, cfg)
    out = _out(args, cfg)
    data = _load_input(Path(args.input)) if args.input else None
    results = bench.run_reconstruct(cfg, out, data=data)
    for name, (recs, secs) in results.items():
        mse = float(np.mean([r["mse"] for r in recs]))
        print(f"{name}: mean mse {mse:.6g}, median {np.median(secs):.4g} s/image")


def cmd_sweep(args, cfg):
    out = _out(args, cfg)
    grid = [float(v) for v in args.grid.split(",")] if args.grid is not None and args.grid.strip() else (
        [] if args.grid is not None else None)
    summary = bench.run_sweep(cfg, out, args.solver, args.param, grid)
    for row in summary:
        print("value {:g}: mean mse {:.6g}, mean residual {:.6g}".format(row[0], row[1], row[4]))


def cmd_bench(args, cfg):
    out = _out(args, cfg)
    rows, checks = bench.run_quality_vs_time(cfg, out, check=args.check)
    for r in rows:
        print(f"{r[0]}: mean mse {r[2]:.6g}")
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    return 1 if failed else 0


def cmd_metrics(args, cfg):
    recon, ref = _read_dir(Path(args.recon)), _read_dir(Path(args.ref))
    ids = sorted(set(recon) & set(ref))
    if not ids:
        raise ConfigError("no common ids between --recon and --ref")
    op = ys = None
    if args.measurements:
        if cfg is None:
            raise ConfigError("--measurements needs --config to rebuild the operator")
        op = SolverContext(cfg).op
        ys = _read_dir(Path(args.measurements))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in ids:
        rec = compute_metrics(recon[i], ref[i], op, ys.get(i) if ys else None)
        rows.append([i] + [rec[m] for m in bench.METRIC_COLUMNS] + [""])
    write_csv(out / "metrics.csv", ["image_id", *bench.METRIC_COLUMNS, bench.PERCEPTUAL_COLUMN], rows)
    print(f"wrote metrics for {len(rows)} images to {out / 'metrics.csv'}")


def cmd_train_prior(args, cfg):
    out = _out(args, cfg)
    spec = cfg.train_prior
    root = SeededRng(cfg.seed)
    scenes = synth_scenes(cfg.scenes.kind, spec.n_scenes, root.child("prior/scenes"), cfg.dims,
                          density=cfg.scenes.density)
    net = denoiser_network(cfg.dims[2], root.child("prior/init"), widths=tuple(spec.widths))
    sched = SolverContext(cfg).sched
    den, hist = train_denoiser(net, scenes, sched, root.child("prior/train"), spec.epochs,
                               AdamState(lr=spec.lr), batch_size=spec.batch_size, log_path=out / "prior_loss.csv")
    save_denoiser(den, out / "prior")
    write_manifest(out, cfg, "train-prior")
    print(f"trained denoiser for {spec.epochs} epochs, final loss {hist[-1] if hist else float('nan'):.6g}; "
          f"checkpoint in {out / 'prior'}")


def distill_dataset(cfg):
    """The synthetic measurement set the teacher cache is built from."""
    ctx = SolverContext(cfg)
    return ctx, scene_set(cfg, ctx.op, n=cfg.distill.n_scenes, label="distill", sigma_n=cfg.distill.sigma_n)


def cmd_build_cache(args, cfg):
    out = _out(args, cfg)
    ctx, data = distill_dataset(cfg)
    prior = build_prior(cfg)
    tcfg = TeacherConfig(ctx.sched, ctx.pinv, sigma_y=cfg.distill.sigma_y)
    ids = [i.replace("img", "item") for i in data.ids]
    t0 = time.perf_counter()
    path = build_teacher_cache(dict(zip(ids, data.ys)), ctx.op, prior, tcfg, derive_seed(cfg.seed, "teacher"),
                               out / "cache", overwrite=args.overwrite)
    elapsed = time.perf_counter() - t0
    (out / "references").mkdir(exist_ok=True)
    for i, x in zip(ids, data.scenes):
        write_tensor(out / "references" / f"{i}.tensor", x)
    write_csv(out / "timing_build_cache.csv", ["items", "seconds"], [[len(ids), elapsed]])
    write_manifest(out, cfg, "distill build-cache", bench._prior_inputs(cfg), {"cache": path.name})
    print(f"teacher cache with {len(ids)} items in {path}")


def _cache_path(args, cfg) -> Path:
    root = Path(args.cache) if args.cache else cfg.resolve(cfg.distill.cache_root)
    root = root / "cache" if (root / "cache").is_dir() else root
    found = sorted(p for p in root.iterdir() if (p / "manifest.json").exists()) if root.is_dir() else []
    if len(found) != 1:
        raise ConfigError(f"expected exactly one teacher cache under {root}, found {len(found)}")
    return found[0]


def cmd_distill_train(args, cfg):
    out = _out(args, cfg)
    spec = cfg.distill
    t_fix = args.t_fix or spec.t_fix
    ctx = SolverContext(cfg)
    cache = load_cache(_cache_path(args, cfg))
    root = SeededRng(cfg.seed)
    model = make_student(cfg.dims[2], root.child("student/init"), t_fix=t_fix, widths=tuple(spec.widths),
                         project_null=args.project_null or spec.project_null)
    epochs = spec.epochs if args.epochs is None else args.epochs
    res = train_student(model, cache, ctx.op, ctx.pinv, AdamState(lr=spec.lr), epochs, root.child("student/train"),
                        batch_size=spec.batch_size, curves_path=out / "curves.csv")
    save_student(model, out / "student")
    fp = operator_fingerprint(ctx.op, ctx.pinv)
    (out / "student" / "operator.json").write_text(json.dumps(fp, indent=2, sort_keys=True) + "\n")
    write_manifest(out, cfg, "distill train", {"cache": cache.path},
                   {"t_fix": t_fix, "epochs": epochs, "batch_size": spec.batch_size, "augmentation": "none"})
    last = res.curves[-1] if res.curves else (0, res.initial_train_mse, res.initial_test_mse)
    print(f"student ({t_fix}) after {last[0]} epochs: train mse {last[1]:.6g}, test mse {last[2]:.6g}")


def cmd_distill_infer(args, cfg):
    out = _out(args, cfg)
    ctx = SolverContext(cfg)
    cache_dir = _cache_path(args, cfg)
    cache = load_cache(cache_dir)
    student_dir = Path(args.student) if args.student else cfg.resolve(cfg.distill.student_dir)
    if not (student_dir / "student.json").exists():
        raise ConfigError(f"no student checkpoint at {student_dir}")
    model = load_student(student_dir)
    ids = [i for i in cache.ids if is_test_item(i)] if not args.all else list(cache.ids)
    idx = [cache.ids.index(i) for i in ids]
    outs, secs = student_infer_batch(model, ctx.op, ctx.pinv, cache.y[idx])
    refs_dir = cache_dir.parent.parent / "references"
    (out / "recon").mkdir(exist_ok=True)
    rows = []
    for k, (i, x) in enumerate(zip(ids, outs)):
        write_tensor(out / "recon" / f"{i}.tensor", x)
        teacher = cache.target[idx[k]]
        ref = refs_dir / f"{i}.tensor"
        mse_ref = float(np.mean((x - read_tensor(ref)) ** 2)) if ref.exists() else float("nan")
        resid = float(np.linalg.norm(ctx.op.apply(x) - cache.y[idx[k]]))
        rows.append([i, float(np.mean((x - teacher) ** 2)), mse_ref, resid])
    write_csv(out / "infer_metrics.csv", ["image_id", "mse_to_teacher", "mse_to_reference", "residual"], rows)
    write_csv(out / "timing_infer.csv", ["image_id", "seconds"], [[i, s] for i, s in zip(ids, secs)])
    write_manifest(out, cfg, "distill infer", {"cache": cache_dir, "student": student_dir})
    print(f"student inference on {len(ids)} items, median {np.median(secs) * 1e3:.3f} ms/image")


# parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsdd", description="Lensless reconstruction and null-space distillation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_, parent=sub, config=True):
        sp = parent.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", required=True, help="experiment YAML/JSON file")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.set_defaults(func=func)
        return sp

    verb("simulate", cmd_simulate, "generate scenes and simulated captures")
    r = verb("reconstruct", cmd_reconstruct, "run solvers and write reconstructions + metrics")
    r.add_argument("--solver", choices=sorted(bench.SOLVER_PARAMS))
    r.add_argument("--sigma-y", type=float)
    r.add_argument("--zeta", type=float)
    r.add_argument("--steps", type=int, help="diffusion steps T")
    r.add_argument("--student", help="student checkpoint directory")
    r.add_argument("--input", help="directory written by `simulate` to reconstruct instead of regenerating")
    s = verb("sweep", cmd_sweep, "sweep one solver parameter over a grid")
    s.add_argument("--solver")
    s.add_argument("--param")
    s.add_argument("--grid", help="comma-separated values")
    b = verb("bench", cmd_bench, "quality-vs-time table over the configured solvers")
    b.add_argument("--check", action="store_true", help="assert the runtime / quality orderings")
    m = verb("metrics", cmd_metrics, "metrics for a directory of reconstructions", config=False)
    m.add_argument("--config")
    m.add_argument("--recon", required=True)
    m.add_argument("--ref", required=True)
    m.add_argument("--measurements")
    m.set_defaults(out_required=True)
    verb("train-prior", cmd_train_prior, "train the learned denoiser prior")

    d = sub.add_parser("distill", help="null-space diffusion distillation")
    dsub = d.add_subparsers(dest="stage", required=True)
    bc = verb("build-cache", cmd_build_cache, "run the fixed-seed teacher and cache its outputs", parent=dsub)
    bc.add_argument("--overwrite", action="store_true", help="replace caches built from other configs")
    tr = verb("train", cmd_distill_train, "train the student on a teacher cache", parent=dsub)
    tr.add_argument("--cache", help="directory written by `distill build-cache`")
    tr.add_argument("--t-fix", choices=["high", "low"])
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--project-null", action="store_true")
    inf = verb("infer", cmd_distill_infer, "single-pass student inference on held-out items", parent=dsub)
    inf.add_argument("--cache")
    inf.add_argument("--student")
    inf.add_argument("--all", action="store_true", help="infer on every cached item, not only the test split")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else None
        if args.verb == "metrics" and not args.out:
            raise ConfigError("metrics needs --out")
        rc = args.func(args, cfg)
        return int(rc or 0)
    except NsddError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
