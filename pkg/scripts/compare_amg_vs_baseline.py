#!/usr/bin/env python3
"""Train AMG and the plain FM/CFG baseline under matched budgets, then sweep cfg.

Writes one CSV row per (objective, seed, cfg_scale) and prints FD at cfg 1.0
plus each model's best swept FD.

    python3 scripts/compare_amg_vs_baseline.py --steps 20000 --seeds 0 1 2 --out compare.csv
    python3 scripts/compare_amg_vs_baseline.py --steps 5000 --w 0.45   # a stable guidance scale
"""
from __future__ import annotations

import argparse
import csv
import time

import numpy as np

from flowguide.cli import sample_conditions
from flowguide.metrics import evaluate_samples
from flowguide.objectives import AlignConfig, GuidanceConfig
from flowguide.oracles import default_task
from flowguide.samplers import SamplerConfig
from flowguide.trainer import TrainConfig, train


def run(objective: str, seed: int, steps: int, w: float, lam: float):
    align = AlignConfig(lam=lam if objective == "amg" else 0.0)
    cfg = TrainConfig(objective=objective, seed=seed, total_steps=steps, guidance=GuidanceConfig(w=w), align=align)
    start = time.perf_counter()
    try:
        state = train(cfg, default_task())
    except FloatingPointError as exc:
        print(f"  {objective} seed {seed}: training failed ({exc})")
        return None, time.perf_counter() - start
    return state, time.perf_counter() - start


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--w", type=float, default=1.45)
    ap.add_argument("--lam", type=float, default=0.5)
    ap.add_argument("--cfg", type=float, nargs="+", default=[1.0, 1.45, 4.0, 6.0])
    ap.add_argument("--sampler", default="euler_maruyama")
    ap.add_argument("--n", type=int, default=2000, help="samples per condition")
    ap.add_argument("--out", default="compare.csv")
    args = ap.parse_args()

    task = default_task()
    rows = []
    for seed in args.seeds:
        for objective in ("amg", "fm_cfg_baseline"):
            state, secs = run(objective, seed, args.steps, args.w, args.lam)
            fds = {}
            for s in args.cfg:
                fd = acc = float("nan")
                if state is not None:
                    sampler = SamplerConfig(kind=args.sampler, cfg_scale=s, seed=1234)
                    try:
                        with np.errstate(over="ignore", invalid="ignore"):
                            x, labels, _ = sample_conditions(state, task, args.n, sampler, sampler.seed)
                        agg = evaluate_samples(x, labels, task).aggregate
                        fd, acc = agg.fd, agg.accuracy
                    except FloatingPointError:
                        pass
                fds[s] = fd
                rows.append([objective, seed, s, fd, acc, round(secs, 1)])
            best = min(fds.values(), key=lambda v: np.inf if np.isnan(v) else v)
            print(f"{objective:16s} seed {seed}: FD@cfg1 {fds.get(1.0, float('nan')):.4g}  best {best:.4g}  "
                  f"({secs / 60:.1f} min)")

    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["objective", "seed", "cfg_scale", "fd", "accuracy", "train_seconds"])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows -> {args.out}")


if __name__ == "__main__":
    main()
