#!/usr/bin/env python3
"""Four-scenario ablation on one environment: augmentation on or off during
training crossed with on or off during testing, on shared seeds.

Prints the final-iteration evaluation returns per cell. Uses the library
directly; for file outputs, use the CLI with ablation_grid: true instead.
"""

import argparse

import numpy as np

from l1aug.dynmodel import TrainOptions
from l1aug.envsim import DisturbanceSpec, make_env
from l1aug.l1core import default_l1_config
from l1aug.mbrl import LoopConfig, MpcConfig, train_loop


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--env", default="pendulum")
    parser.add_argument("--kind", default="action_noise")
    parser.add_argument("--sigma-a", type=float, default=0.1)
    parser.add_argument("--amplitude", type=float, default=0.0)
    parser.add_argument("--iterations", type=int, default=3)
    parser.add_argument("--episodes", type=int, default=5)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--eps-a", type=float, default=0.3)
    args = parser.parse_args()

    env = make_env(args.env)
    dist = DisturbanceSpec(kind=args.kind, amplitude=args.amplitude, sigma_a=args.sigma_a)
    mpc = MpcConfig(horizon=15, n_candidates=200)
    l1cfg = default_l1_config(env.n, env.dt, eps_a=args.eps_a)
    opts = TrainOptions(max_epochs=60, patience=8)

    print(f"env {args.env}, disturbance {args.kind}, seeds {args.seeds}")
    for l1_train in (False, True):
        for l1_test in (False, True):
            loop = LoopConfig(
                iterations=args.iterations, episodes_per_iteration=args.episodes,
                eval_episodes=2, l1_train=l1_train, l1_test=l1_test, l1_warmup_iterations=1,
            )
            finals = []
            for seed in args.seeds:
                record, _ = train_loop(env, dist, loop, mpc, l1cfg, train_opts=opts, seed=seed)
                finals.append(float(np.mean(record.eval_returns[max(record.eval_returns)])))
            tag = f"train={'on' if l1_train else 'off'} test={'on' if l1_test else 'off'}"
            print(f"  {tag}: final returns {np.round(finals, 2).tolist()} "
                  f"mean {np.mean(finals):.2f} +- {np.std(finals):.2f}")


if __name__ == "__main__":
    main()
