#!/usr/bin/env python3
"""Paired disturbance-rejection study on the pendulum.

Trains one ensemble on clean random-input data, then evaluates matched
episodes with and without the adaptive augmentation under a constant matched
disturbance plus actuation noise. Prints per-seed costs and the paired
summary; optionally writes a CSV.
"""

import argparse
import csv

import numpy as np

from l1aug.dynmodel import TrainOptions, TransitionDataset, make_ensemble, train
from l1aug.envsim import DisturbanceSpec, make_env, step_true
from l1aug.l1core import default_l1_config
from l1aug.mbrl import MpcConfig, episode_rng, run_episode


def collect_rows(env, n_rows, seed):
    rng = np.random.default_rng(seed)
    ds = TransitionDataset(env.n, env.m)
    while len(ds) < n_rows:
        x = env.x0_sampler(rng)
        for t in range(100):
            u = rng.uniform(env.input_low, env.input_high)
            tr = step_true(env, DisturbanceSpec(), x, u, t, rng)
            ds.append(tr.x, tr.u_applied, tr.x_next)
            x = tr.x_next_true
            if not env.in_state_bounds(x) or len(ds) >= n_rows:
                break
    return ds


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--episodes-per-seed", type=int, default=2)
    parser.add_argument("--amplitude", type=float, default=0.3)
    parser.add_argument("--sigma-a", type=float, default=0.1)
    parser.add_argument("--rows", type=int, default=4000)
    parser.add_argument("--eps-a", type=float, default=0.3)
    parser.add_argument("--out", default=None, help="optional CSV path")
    args = parser.parse_args()

    env = make_env("pendulum")
    print(f"collecting {args.rows} clean rows and training the ensemble ...")
    ds = collect_rows(env, args.rows, seed=12345)
    ens, rep = train(
        make_ensemble(env.n, env.m, seed=7), ds, TrainOptions(max_epochs=60, patience=8, seed=3)
    )
    print(f"validation losses: {np.round(rep.best_val, 6).tolist()}")

    dist = DisturbanceSpec(kind="constant_matched", amplitude=args.amplitude, sigma_a=args.sigma_a)
    mpc = MpcConfig(horizon=15, n_candidates=200)
    l1cfg = default_l1_config(env.n, env.dt, eps_a=args.eps_a)

    def cost(use_l1, seed):
        vals = []
        for ep in range(args.episodes_per_seed):
            res = run_episode(env, dist, ens, mpc, l1cfg, use_l1, episode_rng(seed, 0, ep, "eval"))
            vals.append(-res.episode_return)
        return float(np.mean(vals))

    rows = []
    wins = 0
    for seed in range(args.seeds):
        c_off = cost(False, seed)
        c_on = cost(True, seed)
        wins += c_on < c_off
        rows.append((seed, c_off, c_on))
        print(f"seed {seed}: cost baseline {c_off:8.3f}  augmented {c_on:8.3f}")

    off = [r[1] for r in rows]
    on = [r[2] for r in rows]
    print(f"\nmean cost baseline {np.mean(off):.3f} +- {np.std(off):.3f}")
    print(f"mean cost augmented {np.mean(on):.3f} +- {np.std(on):.3f}")
    print(f"augmented wins {wins}/{args.seeds} paired seeds")

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "cost_baseline", "cost_augmented"])
            writer.writerows(rows)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
