#!/usr/bin/env python3
"""Why the training-time guidance scale must stay below 1 at this scale.

With guidance on, the conditional net regresses toward m_c + w * d and the
unconditional net toward m + w * E_post[d], where d = u_c - u_null is the EMA
gap. Iterating that map on the closed-form oracle velocities gives

    d_{k+1} = delta + w * (d_k - E_post[d_k]),   delta_c = m_c - m,

whose centred part scales by w each round: it settles at delta / (1 - w) for
w < 1 and grows geometrically for w > 1.

Usage:
    python3 scripts/guidance_stability.py
    python3 scripts/guidance_stability.py --train --steps 6000 --w 0.45 1.45
"""
from __future__ import annotations

import argparse

import numpy as np

from flowguide.objectives import GuidanceConfig
from flowguide.oracles import default_task, oracle_velocity, sample_task
from flowguide.trainer import TrainConfig, train


def posterior(x: np.ndarray, t: float, task) -> np.ndarray:
    """p(c | x_t) under uniform condition weights; shape (n, K)."""
    a = 1.0 - t
    var = a * a * task.sigma ** 2 + t * t
    d2 = ((x[:, None, :] - a * task.mean_array[None]) ** 2).sum(-1)
    logits = -0.5 * d2 / var
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def gap_iteration(w: float, rounds: int, t: float = 0.5, n: int = 4000, seed: int = 0) -> list[float]:
    """RMS of the guidance gap after each round of the idealised fixed-point map."""
    task = default_task()
    rng = np.random.default_rng(seed)
    labels = rng.integers(task.K, size=n)
    x0 = sample_task(task, rng, labels)
    xt = (1 - t) * x0 + t * rng.standard_normal(x0.shape)
    m_c = np.stack([oracle_velocity(xt, t, mu, task.sigma) for mu in task.mean_array], axis=1)
    post = posterior(xt, t, task)
    m = (post[..., None] * m_c).sum(1)
    delta = m_c - m[:, None]
    d = np.zeros_like(delta)
    out = []
    for _ in range(rounds):
        centred = d - (post[..., None] * d).sum(1, keepdims=True)
        d = delta + w * centred
        out.append(float(np.sqrt((d ** 2).sum(-1).mean())))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--w", type=float, nargs="+", default=[0.45, 0.9, 1.0, 1.45])
    ap.add_argument("--rounds", type=int, default=12)
    ap.add_argument("--train", action="store_true", help="also run short AMG trainings per w")
    ap.add_argument("--steps", type=int, default=6000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("idealised gap RMS per round (t=0.5)")
    for w in args.w:
        gaps = gap_iteration(w, args.rounds, seed=args.seed)
        shown = " ".join(f"{g:.3g}" for g in gaps[:: max(1, args.rounds // 6)])
        print(f"  w={w:<5g} {shown}  -> final {gaps[-1]:.3g}")

    if not args.train:
        return
    print(f"\nAMG loss (200-step mean) over {args.steps} steps, EMA decay 0.999, warmup 1000")
    for w in args.w:
        cfg = TrainConfig(seed=args.seed, total_steps=args.steps, guidance=GuidanceConfig(w=w))
        trace: list[float] = []
        try:
            train(cfg, default_task(), on_step=lambda s, l: trace.append(l.amg))
            status = ""
        except FloatingPointError as exc:
            status = f" (stopped: {exc})"
        marks = range(1000, len(trace) + 1, max(1000, args.steps // 6))
        print(f"  w={w:<5g} " + " ".join(f"{k}:{np.mean(trace[k - 200:k]):.3g}" for k in marks) + status)


if __name__ == "__main__":
    main()
