#!/usr/bin/env python3
"""Variant ablation on synthetic delay+abrupt data.

Trains CNDE1_ST, CNDE3_STE, and MNDE with an identical protocol across a few
seeds and prints a test-MAE table. The expectation at this scale is a trend,
not paper-sized margins: each added view should not hurt, and the full model
should come out ahead on most seeds.
"""
import argparse
import time
from fractions import Fraction

import numpy as np

from mnde.data import FlowDataset, make_windows, synth_generate, window_arrays
from mnde.model import ModelConfig, ModelParams
from mnde.training import Normalizer, predict, train

VARIANTS = ("CNDE1_ST", "CNDE3_STE", "MNDE")


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nodes", type=int, default=20)
    ap.add_argument("--days", type=int, default=7)
    ap.add_argument("--data-seed", type=int, default=22,
                    help="generator seed; 22 is screened for ODE stability")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--weight-decay", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--train-stride", type=int, default=1,
                    help="subsample training windows for speed")
    return ap.parse_args()


def main():
    args = parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    ds = synth_generate(args.nodes, args.days, args.data_seed,
                        scenario="delay+abrupt", noise=1.0)
    norm = Normalizer.fit(ds.split_values("train"))
    zds = FlowDataset(norm.apply(ds.values))
    cfg = ModelConfig(n=args.nodes, l=4, l_prime=24, c=64, c_prime=16, d=1,
                      heads=4, loops=3, r=Fraction(1), r_prime=Fraction(1),
                      step=Fraction(1, 2))
    xt, yt = window_arrays(make_windows(zds, cfg.l, cfg.l_prime, split="train"))
    xv, yv = window_arrays(make_windows(zds, cfg.l, cfg.l_prime, split="val"))
    xs, ys = window_arrays(make_windows(zds, cfg.l, cfg.l_prime, split="test"))
    xt, yt = xt[::args.train_stride], yt[::args.train_stride]
    print(f"windows: train {xt.shape[0]} val {xv.shape[0]} test {xs.shape[0]}")

    table = {}
    for variant in VARIANTS:
        for seed in seeds:
            t0 = time.time()
            result = train(ModelParams.init(cfg, variant, seed), xt, yt, xv, yv,
                           epochs=args.epochs, batch_size=args.batch_size,
                           seed=seed, lr=args.lr,
                           weight_decay=args.weight_decay,
                           patience=args.epochs)
            pred = predict(result.params, xs, batch_size=64)
            mae = float(np.mean(np.abs(pred - ys))) * norm.std
            table[variant, seed] = mae
            print(f"{variant:10s} seed {seed}: test MAE {mae:.3f} "
                  f"(best epoch {result.best_epoch}, {time.time() - t0:.0f}s)",
                  flush=True)

    print("\nvariant      " + "".join(f"seed{seed:>2}   " for seed in seeds))
    for variant in VARIANTS:
        row = "".join(f"{table[variant, seed]:8.3f} " for seed in seeds)
        print(f"{variant:12s} {row}")
    ordered = sum(table["MNDE", s] <= table["CNDE3_STE", s]
                  <= 1.10 * table["CNDE1_ST", s] for s in seeds)
    print(f"\nMNDE <= CNDE3_STE <= 1.1*CNDE1_ST on {ordered}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
