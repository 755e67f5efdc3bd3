"""Guidance-strength sweep: DDNM+ sigma_y and DPS zeta over the same grid.

    python scripts/sweep_guidance.py configs/desk.yaml runs/sweep [--grid 0,0.25,0.5,0.75,1]

Writes one `sweep` output directory per solver and prints mean MSE and
data residual per grid value, the two axes of the consistency/quality
trade-off.
"""

import argparse
import csv
from pathlib import Path

from nsdd.cli import main as nsdd

SWEEPS = (("ddnm+", "sigma_y"), ("dps", "zeta"))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("out")
    ap.add_argument("--grid", default="0,0.25,0.5,0.75,1")
    args = ap.parse_args()
    for solver, param in SWEEPS:
        out = Path(args.out) / f"{solver}_{param}"
        rc = nsdd(["sweep", "--config", args.config, "--out", str(out), "--solver", solver, "--param", param,
                   "--grid", args.grid])
        if rc != 0:
            raise SystemExit(rc)
        with open(out / "sweep_summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        print(f"\n{solver} {param:>8} {'mse':>10} {'psnr':>8} {'residual':>10}")
        for r in rows:
            print(f"{'':{len(solver)}} {float(r['value']):>8.2f} {float(r['mean_mse']):>10.5f} "
                  f"{float(r['mean_psnr']):>8.2f} {float(r['mean_residual']):>10.5f}")


if __name__ == "__main__":
    main()
