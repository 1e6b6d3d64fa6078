#!/usr/bin/env python3
"""End-to-end desk-scale comparison of uniform vs capacity-aware pruning.

Trains the small texture classifier over several seeds, sweeps the three
pruning methods across a sparsity grid with both allocation strategies, and
writes one CSV per seed plus a console summary of the accuracy gaps.
"""
import argparse
import time
from pathlib import Path

import numpy as np

from prunekit.capacity import capacity_profile
from prunekit.data import synthetic_textures
from prunekit.engine import TrainConfig, evaluate, train
from prunekit.presets import desk_chain
from prunekit.sweep import SweepSpec, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default="desk_results")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--grid", default="0.3,0.5,0.7")
    ap.add_argument("--methods", default="weight-magnitude,channel-l1,channel-random")
    ap.add_argument("--trials", type=int, default=10, help="channel-random repeats")
    ap.add_argument("--epochs", type=int, default=14)
    ap.add_argument("--lr", type=float, default=0.008)
    ap.add_argument("--finetune", action="store_true")
    args = ap.parse_args()

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = [float(v) for v in args.grid.split(",")]
    methods = tuple(args.methods.split(","))
    data = synthetic_textures(5000, seed=123)

    gaps = {s: [] for s in grid}
    t0 = time.time()
    for seed in range(args.seeds):
        g = train(desk_chain(seed=seed), data,
                  TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=seed))
        acc0 = evaluate(g, data)
        profile = capacity_profile(g, data, batch_size=512)
        spec = SweepSpec(grid=grid, baseline="both", methods=methods,
                         trials=args.trials, finetune=args.finetune,
                         seeds=tuple(seed + t for t in range(args.trials)))
        csv_path = outdir / f"sweep_seed{seed}.csv"
        rows = run_sweep(g, profile, data, spec, csv_path)
        acc = {(r["method"], r["allocation"], r["s"]): r["accuracy"]
               for r in rows if r["phase"] == "p" and r.get("trial") in (0, "0")}
        for s in grid:
            key_l = ("weight-magnitude", "layerwise", s)
            key_u = ("weight-magnitude", "uniform", s)
            if key_l in acc and key_u in acc:
                gaps[s].append(acc[key_l] - acc[key_u])
        print(f"seed {seed}: trained acc={acc0:.3f}, csv={csv_path} "
              f"({time.time() - t0:.0f}s)")

    print("\nweight-magnitude, prune-only, layerwise minus uniform accuracy:")
    for s in grid:
        if gaps[s]:
            arr = np.array(gaps[s])
            wins = int((arr >= 0).sum())
            print(f"  s={s}: mean gap {arr.mean():+.4f}, wins {wins}/{len(arr)}")


if __name__ == "__main__":
    main()
