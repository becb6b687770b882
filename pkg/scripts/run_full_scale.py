#!/usr/bin/env python3
"""Full-scale training recipe (hours of compute; not part of the test suite).

Reproduces the reference configuration on a real traffic dataset: 12 input
intervals, 96 forecast intervals (one hour in, eight hours out at 5-minute
resolution), c=64, c'=32, 3 loops, 4 heads, r = r' = step = 1/3.

Expects a CSV in the canonical format ("# n=..." header, one row per
interval); convert PEMS-style .npz sensor data yourself or generate a
long synthetic stand-in with `mnde synth --days 60`.

Example:
    python scripts/run_full_scale.py flows.csv --epochs 50 --out full.ckpt
    mnde eval full.ckpt --dataset flows.csv --checkpoints 23,47,95
"""
import argparse
import subprocess
import sys


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("dataset")
    ap.add_argument("--out", default="full.ckpt")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cmd = [sys.executable, "-m", "mnde.cli", "train",
           "--dataset", args.dataset,
           "--variant", "MNDE",
           "--l", "12", "--l_prime", "96",
           "--c", "64", "--c_prime", "32",
           "--d", "2", "--h", "4", "--loops", "3",
           "--r", "1/3", "--r_prime", "1/3", "--step", "1/3",
           "--lr", "1e-3", "--weight_decay", "1e-3",
           "--epochs", str(args.epochs),
           "--batch_size", str(args.batch_size),
           "--seed", str(args.seed),
           "--checkpoints", "23,47,95",
           "--out", args.out, "--verbose"]
    sys.exit(subprocess.run(cmd).returncode)


if __name__ == "__main__":
    main()
