"""Quality-vs-time table with the ordinal checks.

    python scripts/quality_vs_time.py configs/desk.yaml runs/desk

Expects `run_distillation.py` to have produced <run>/prior and
<run>/high/student (the config's prior path and student path must point
there). Runs `bench --check` into <run>/bench and prints the table.
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
    out = Path(args.run) / "bench"
    rc = nsdd(["bench", "--config", args.config, "--out", str(out), "--check"])
    with open(out / "quality_vs_time.csv") as fh:
        quality = {r["solver"]: r for r in csv.DictReader(fh)}
    with open(out / "timing_quality_vs_time.csv") as fh:
        timing = {r["solver"]: r for r in csv.DictReader(fh)}
    print(f"\n{'solver':<8} {'median s':>10} {'mse':>9} {'psnr':>7} {'ssim':>6}")
    for name in sorted(timing, key=lambda n: float(timing[n]["median_seconds"])):
        q = quality[name]
        print(f"{name:<8} {float(timing[name]['median_seconds']):>10.5f} {float(q['mean_mse']):>9.5f} "
              f"{float(q['mean_psnr']):>7.2f} {float(q['mean_ssim']):>6.3f}")
    raise SystemExit(rc)


if __name__ == "__main__":
    main()
