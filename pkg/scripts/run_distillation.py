"""Full distillation run through the CLI: prior, teacher cache, student, held-out scoring.

    python scripts/run_distillation.py configs/desk.yaml runs/desk [--t-fix high] [--skip-prior]

Prints the held-out MSE-to-teacher of the anchor A+y and of the student.
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from nsdd.cli import main as nsdd
from nsdd.config import build_operator, build_pinv, load_config
from nsdd.distill import is_test_item, load_cache
from nsdd.forward_model import pinv_apply


def run(*argv):
    t0 = time.perf_counter()
    rc = nsdd(list(argv))
    if rc != 0:
        raise SystemExit(f"nsdd {' '.join(argv)} exited with {rc}")
    print(f"  {argv[0]} {argv[1] if argv[0] == 'distill' else ''}: {time.perf_counter() - t0:.1f}s", flush=True)


def anchor_vs_student(config: str, cache_dir: Path, infer_dir: Path) -> tuple[float, float]:
    cfg = load_config(config)
    op = build_operator(cfg)
    pinv = build_pinv(cfg, op)
    cache = load_cache(next((cache_dir / "cache").iterdir()))
    errs = [np.mean((pinv_apply(pinv, cache.y[k]) - cache.target[k]) ** 2)
            for k, i in enumerate(cache.ids) if is_test_item(i)]
    with open(infer_dir / "infer_metrics.csv") as fh:
        student = [float(r["mse_to_teacher"]) for r in csv.DictReader(fh)]
    return float(np.mean(errs)), float(np.mean(student))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("out")
    ap.add_argument("--t-fix", default="high", choices=["high", "low"])
    ap.add_argument("--skip-prior", action="store_true", help="reuse an existing <out>/prior")
    args = ap.parse_args()
    out = Path(args.out)
    c = ["--config", args.config]
    if not args.skip_prior:
        run("train-prior", *c, "--out", str(out / "prior"))
    run("distill", "build-cache", *c, "--out", str(out / "cache"), "--overwrite")
    run("distill", "train", *c, "--cache", str(out / "cache"), "--t-fix", args.t_fix, "--out", str(out / args.t_fix))
    run("distill", "infer", *c, "--cache", str(out / "cache"), "--student", str(out / args.t_fix / "student"),
        "--out", str(out / f"infer_{args.t_fix}"))
    anchor, student = anchor_vs_student(args.config, out / "cache", out / f"infer_{args.t_fix}")
    print(f"held-out MSE to teacher: anchor {anchor:.6f}, student {student:.6f}, ratio {anchor / student:.2f}")


if __name__ == "__main__":
    main()
