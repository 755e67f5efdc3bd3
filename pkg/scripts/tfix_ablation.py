"""Fixed-timestep ablation: two students on one teacher cache, differing only in t_fix.

    python scripts/tfix_ablation.py configs/desk.yaml runs/desk

Needs <run>/cache from `run_distillation.py`. Writes <run>/high and
<run>/low (each with curves.csv: epoch,train_mse,test_mse) and prints
the final test losses.
"""

import argparse
import csv
from pathlib import Path

from nsdd.cli import main as nsdd


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("run")
    args = ap.parse_args()
    run = Path(args.run)
    finals = {}
    for t_fix in ("high", "low"):
        rc = nsdd(["distill", "train", "--config", args.config, "--cache", str(run / "cache"), "--t-fix", t_fix,
                   "--out", str(run / t_fix)])
        if rc != 0:
            raise SystemExit(rc)
        with open(run / t_fix / "curves.csv") as fh:
            finals[t_fix] = float(list(csv.DictReader(fh))[-1]["test_mse"])
    gap = abs(finals["high"] - finals["low"]) / min(finals.values())
    print(f"final test MSE: high {finals['high']:.6f}, low {finals['low']:.6f} ({100 * gap:.1f}% apart)")


if __name__ == "__main__":
    main()
