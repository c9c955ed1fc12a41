"""Model-learning loop: MPC baseline, episode rollouts, dataset, records.

The loop alternates data collection under the current model, ensemble
retraining, and held-out evaluation. The adaptive augmentation can be
switched on independently for the collection and evaluation phases. When it
is on, the dataset stores the baseline input rather than the augmented one,
so the model keeps learning the dynamics that remain after the augmentation
cancels the uncertainty it can see.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .affine import AffineModel, SwitchEvent, affinize, switching_check
from .dynmodel import Ensemble, TrainOptions, TransitionDataset, make_ensemble, train
from .envsim import DisturbanceSpec, EnvSpec, EpisodeDiverged, Transition, step_true
from .l1core import L1Config, L1State, l1_control

Array = np.ndarray

PHASE_COLLECT = "collect"
PHASE_EVAL = "eval"


@dataclass(frozen=True)
class MpcConfig:
    """Random-shooting planner: sample open-loop sequences, apply the best head.

    Candidate actions are i.i.d. uniform over the input box. Sequences are
    scored by rolling the learned model forward and accumulating the reward
    of each successor state; rollouts that leave the state box stop earning.
    Ties break toward the lowest candidate index.
    """

    horizon: int = 15
    n_candidates: int = 256

    def __post_init__(self):
        if self.horizon < 1 or self.n_candidates < 1:
            raise ValueError("MpcConfig: horizon and n_candidates must be >= 1")


@dataclass(frozen=True)
class LoopConfig:
    """Outer-loop sizing and the two independent augmentation flags.

    ``l1_warmup_iterations`` delays the augmentation during data collection
    until that many model updates have happened. Before the first update the
    estimator compares reality against an untrained network, and storing the
    baseline input while executing the augmented one then bakes the resulting
    junk compensation into the dataset as a permanent input-map bias. One
    warmup iteration (collecting without augmentation) prevents that loop;
    zero reproduces the unconditional scheme.
    """

    iterations: int = 5
    episodes_per_iteration: int = 3
    eval_episodes: int = 2
    l1_train: bool = True
    l1_test: bool = True
    l1_warmup_iterations: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.episodes_per_iteration < 1 or self.eval_episodes < 1:
            raise ValueError("LoopConfig: bad loop sizing")
        if self.l1_warmup_iterations < 0:
            raise ValueError("LoopConfig: l1_warmup_iterations must be >= 0")


def mpc_action(model: Ensemble, env: EnvSpec, x: Array, mpc: MpcConfig, rng: np.random.Generator) -> Array:
    """First action of the best sampled sequence under the learned model."""
    cands = rng.uniform(env.input_low, env.input_high, size=(mpc.n_candidates, mpc.horizon, env.m))
    states = np.broadcast_to(np.asarray(x, dtype=float), (mpc.n_candidates, env.n)).copy()
    total = np.zeros(mpc.n_candidates)
    alive = np.ones(mpc.n_candidates, dtype=bool)
    for k in range(mpc.horizon):
        u = cands[:, k, :]
        states = states + model.predict_mean(states, u)
        in_bounds = np.all((states >= env.state_low) & (states <= env.state_high), axis=1)
        alive &= in_bounds
        total += np.where(alive, env.reward(states, u), 0.0)
    best = int(np.argmax(total))
    return cands[best, 0, :]


@dataclass
class EpisodeResult:
    transitions: list[Transition]
    rows: list[dict]
    episode_return: float
    steps: int
    terminated_early: bool
    switch_events: list[SwitchEvent]


def run_episode(
    env: EnvSpec,
    dist: DisturbanceSpec,
    model: Ensemble,
    mpc: MpcConfig,
    l1cfg: L1Config,
    use_l1: bool,
    rng: np.random.Generator,
    x0: Array | None = None,
) -> EpisodeResult:
    """Roll one episode, re-anchoring the affine model per the switching law.

    Each step samples the baseline input, re-anchors if the affine residual
    at (x_t, u_RL) reaches eps_a, augments the input when the adaptive loop
    is on, executes on the true system, and stores (x_t, u_RL, x_{t+1}). The
    controller and the stored rows see observations; the integrator sees the
    true state. Divergence ends the episode with partial data retained.
    """
    x_true = env.x0_sampler(rng) if x0 is None else np.asarray(x0, dtype=float)
    x_obs = x_true
    l1 = L1State.initial(x_obs, env.m)
    am: AffineModel | None = None
    transitions: list[Transition] = []
    rows: list[dict] = []
    events: list[SwitchEvent] = []
    episode_return = 0.0
    terminated = False

    for t in range(env.horizon):
        if not env.in_state_bounds(x_true):
            terminated = True
            break
        u_rl = mpc_action(model, env, x_obs, mpc, rng)

        switch_flag = 0
        residual = None
        xhat_t = l1.xhat
        if use_l1:
            if am is None:
                am = affinize(model, u_rl)
                residual = 0.0
            else:
                decision = switching_check(am, x_obs, u_rl, l1cfg.eps_a)
                residual = decision.residual
                if decision.switch:
                    events.append(SwitchEvent(t=t, old_anchor=am.ubar, new_anchor=u_rl, residual=decision.residual))
                    am = affinize(model, u_rl)
                    switch_flag = 1
            u_cmd, l1 = l1_control(u_rl, x_obs, am, l1, l1cfg)
        else:
            u_cmd = u_rl

        try:
            trans = step_true(env, dist, x_true, u_cmd, t, rng, u_logged=u_rl)
        except EpisodeDiverged:
            terminated = True
            break

        episode_return += trans.reward
        transitions.append(Transition(
            x=x_obs, u_applied=trans.u_applied, u_logged=u_rl,
            x_next=trans.x_next, x_next_true=trans.x_next_true,
            reward=trans.reward, t=t,
        ))
        rows.append({
            "t": t,
            "x": x_obs,
            "xhat": xhat_t if use_l1 else None,
            "xtilde": l1.xtilde if use_l1 else None,
            "sigma": l1.sigma_rate if use_l1 else None,
            "sigma_m": l1.sigma_m if use_l1 else None,
            "sigma_um": l1.sigma_um if use_l1 else None,
            "u_rl": u_rl,
            "u_a": (trans.u_applied - env.clamp_input(u_rl)) if use_l1 else None,
            "u": trans.u_applied,
            "reward": trans.reward,
            "switch": switch_flag,
            "switch_residual": residual,
            "anchor_norm": float(np.linalg.norm(am.ubar)) if am is not None else None,
        })
        x_true = trans.x_next_true
        x_obs = trans.x_next

    return EpisodeResult(
        transitions=transitions,
        rows=rows,
        episode_return=episode_return,
        steps=len(transitions),
        terminated_early=terminated,
        switch_events=events,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def trace_columns(n: int, m: int) -> list[str]:
    cols = ["phase", "iteration", "episode", "seed", "t"]
    cols += [f"x{i}" for i in range(n)]
    cols += [f"xhat{i}" for i in range(n)]
    cols += [f"xtilde{i}" for i in range(n)]
    cols += [f"sigma{i}" for i in range(n)]
    cols += [f"sigma_m{j}" for j in range(m)]
    cols += [f"sigma_um{k}" for k in range(max(n - m, 0))]
    cols += [f"u_rl{j}" for j in range(m)]
    cols += [f"u_a{j}" for j in range(m)]
    cols += [f"u{j}" for j in range(m)]
    cols += ["reward", "switch", "switch_residual", "anchor_norm"]
    return cols

EPISODE_COLUMNS = ["phase", "iteration", "episode", "seed", "steps", "episode_return", "terminated_early", "n_switches"]


@dataclass
class RunRecord:
    """Everything a run produced, in insertion order, ready for CSV emission.

    ``dataset`` points at the accumulated training data (not serialized; used
    by audits that cross-check the logged inputs against the trace).
    """

    n: int
    m: int
    trace: list[list[str]] = field(default_factory=list)
    episodes: list[list[str]] = field(default_factory=list)
    iteration_losses: list[dict] = field(default_factory=list)
    eval_returns: dict[int, list[float]] = field(default_factory=dict)
    dataset: TransitionDataset | None = None

    def add_episode(self, phase: str, iteration: int, episode: int, seed: int, result: EpisodeResult) -> None:
        n_um = max(self.n - self.m, 0)
        for row in result.rows:
            rec = [phase, str(iteration), str(episode), str(seed), str(row["t"])]
            rec += [_fmt(v) for v in row["x"]]
            for key, width in (("xhat", self.n), ("xtilde", self.n), ("sigma", self.n),
                               ("sigma_m", self.m), ("sigma_um", n_um)):
                vals = row[key]
                rec += [_fmt(v) for v in vals] if vals is not None else [""] * width
            rec += [_fmt(v) for v in row["u_rl"]]
            rec += ([_fmt(v) for v in row["u_a"]] if row["u_a"] is not None else [""] * self.m)
            rec += [_fmt(v) for v in row["u"]]
            rec += [_fmt(row["reward"]), str(row["switch"]), _fmt(row["switch_residual"]), _fmt(row["anchor_norm"])]
            self.trace.append(rec)
        self.episodes.append([
            phase, str(iteration), str(episode), str(seed), str(result.steps),
            _fmt(result.episode_return), str(int(result.terminated_early)), str(len(result.switch_events)),
        ])
        if phase == PHASE_EVAL:
            self.eval_returns.setdefault(iteration, []).append(result.episode_return)

    def write_trace_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(trace_columns(self.n, self.m))
            writer.writerows(self.trace)

    def write_episodes_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EPISODE_COLUMNS)
            writer.writerows(self.episodes)


def episode_rng(seed: int, iteration: int, episode: int, phase: str) -> np.random.Generator:
    """Independent stream per (seed, iteration, episode, phase)."""
    return np.random.default_rng([seed, iteration, episode, 0 if phase == PHASE_COLLECT else 1])


def train_loop(
    env: EnvSpec,
    dist: DisturbanceSpec,
    loop_cfg: LoopConfig,
    mpc: MpcConfig,
    l1cfg: L1Config,
    train_opts: TrainOptions = TrainOptions(),
    members: int = 3,
    hidden: tuple[int, ...] = (64, 64),
    seed: int = 0,
) -> tuple[RunRecord, Ensemble]:
    """Collect, retrain, evaluate, repeat for a fixed iteration budget.

    The dataset accumulates across iterations. Evaluation episodes are
    separate from collection episodes so the two augmentation flags act
    independently; iteration 0 records the untrained-model evaluation.
    """
    record = RunRecord(n=env.n, m=env.m)
    model = make_ensemble(env.n, env.m, hidden=hidden, members=members, seed=seed)
    dataset = TransitionDataset(env.n, env.m)
    record.dataset = dataset

    def evaluate(iteration: int) -> None:
        for ep in range(loop_cfg.eval_episodes):
            result = run_episode(env, dist, model, mpc, l1cfg, loop_cfg.l1_test,
                                 episode_rng(seed, iteration, ep, PHASE_EVAL))
            record.add_episode(PHASE_EVAL, iteration, ep, seed, result)

    evaluate(0)
    for iteration in range(1, loop_cfg.iterations + 1):
        l1_collect = loop_cfg.l1_train and iteration > loop_cfg.l1_warmup_iterations
        for ep in range(loop_cfg.episodes_per_iteration):
            result = run_episode(env, dist, model, mpc, l1cfg, l1_collect,
                                 episode_rng(seed, iteration, ep, PHASE_COLLECT))
            record.add_episode(PHASE_COLLECT, iteration, ep, seed, result)
            for trans in result.transitions:
                dataset.append(trans.x, trans.u_logged, trans.x_next)
        opts = replace(train_opts, seed=train_opts.seed * 1_000_003 + seed * 1_009 + iteration)
        model, report = train(model, dataset, opts)
        record.iteration_losses.append({
            "iteration": iteration,
            "rows": len(dataset),
            "train_loss": report.final_train,
            "val_loss": report.best_val,
        })
        evaluate(iteration)
    return record, model
