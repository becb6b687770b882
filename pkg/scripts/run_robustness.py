#!/usr/bin/env python3
"""Sweep input corruption rates against a trained checkpoint.

Missing entries are spline-filled before forecasting; zeroed entries are left
as real (wrong) measurements. Targets stay clean, so the table shows how much
each corruption mode costs at evaluation time.
"""
import argparse
import json
import subprocess
import sys
import tempfile


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--split", default="test")
    ap.add_argument("--missing-rates", default="0,0.1,0.3,0.5")
    ap.add_argument("--zero-rates", default="0,0.05")
    args = ap.parse_args()

    with tempfile.NamedTemporaryFile(suffix=".json") as out:
        cmd = [sys.executable, "-m", "mnde.cli", "robustness", args.checkpoint,
               "--dataset", args.dataset, "--split", args.split,
               "--missing-rates", args.missing_rates,
               "--zero-rates", args.zero_rates, "--out", out.name]
        subprocess.run(cmd, check=True)
        blob = json.load(open(out.name))

    for mode in ("missing", "zeros"):
        print(f"\n{mode} rate   " + "   ".join(f"mae@{k}" for k in
              next(iter(blob[mode].values()))["checkpoints"]))
        base = None
        for rate, report in blob[mode].items():
            maes = [report["checkpoints"][k]["mae"]
                    for k in report["checkpoints"]]
            if base is None:
                base = maes
            rel = " ".join(f"{m:8.3f} ({100 * (m / b - 1):+5.1f}%)"
                           for m, b in zip(maes, base))
            print(f"{float(rate):12.2f} {rel}")


if __name__ == "__main__":
    main()
