"""Operator entry point: YAML configs in, reproducible CSV/JSON artifacts out.

Commands:
  run      train-and-evaluate loop per seed, optionally as an ablation grid
  verify   estimation-error bound experiment across a sampling-time grid
  compare  paired baseline-vs-augmented experiments on shared seeds

Every run directory receives a meta.json echoing the fully resolved config,
so a run is reproducible from its own outputs. Exit codes: 0 success,
1 config error, 2 criterion failure, 3 runtime abort.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .dynmodel import TrainOptions
from .envsim import ConfigError, DisturbanceSpec, make_env
from .l1core import default_l1_config
from .mbrl import (
    PHASE_EVAL,
    LoopConfig,
    MpcConfig,
    RunRecord,
    episode_rng,
    run_episode,
    train_loop,
)
from .verify import check_assumption_bound, make_synthetic_spec, run_ts_grid

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CRITERION = 2
EXIT_RUNTIME = 3

OUT_ROOT_ENV = "L1AUG_OUT_ROOT"

# Switching tolerance defaults per catalog environment (config-overridable).
EPS_A_DEFAULTS = {"cartpole": 1.0, "pendulum": 0.3, "double_integrator": 0.3}


# --- Config schema ----------------------------------------------------------


@dataclass
class EnvSection:
    name: str = "pendulum"
    overrides: dict = field(default_factory=dict)


@dataclass
class DistSection:
    kind: str = "none"
    amplitude: float = 0.0
    frequency: float = 0.0
    sigma_a: float = 0.0
    sigma_o: float = 0.0


@dataclass
class ModelSection:
    members: int = 3
    hidden: list = field(default_factory=lambda: [64, 64])
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 150
    patience: int = 10
    val_fraction: float = 0.2
    min_rows: int = 64


@dataclass
class MpcSection:
    horizon: int = 15
    n_candidates: int = 256


@dataclass
class L1Section:
    as_value: float = -1.0
    omega_factor: float = 0.35
    eps_a: float | None = None


@dataclass
class LoopSection:
    iterations: int = 5
    episodes_per_iteration: int = 3
    eval_episodes: int = 2
    l1_train: bool = True
    l1_test: bool = True
    l1_warmup_iterations: int = 0


@dataclass
class RunConfig:
    name: str = "run"
    env: EnvSection = field(default_factory=EnvSection)
    disturbance: DistSection = field(default_factory=DistSection)
    model: ModelSection = field(default_factory=ModelSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    l1: L1Section = field(default_factory=L1Section)
    loop: LoopSection = field(default_factory=LoopSection)
    seeds: list = field(default_factory=lambda: [0])
    out: str | None = None
    ablation_grid: bool = False
    report_window: int = 5


@dataclass
class SyntheticSection:
    preset: str = "default"
    params: dict = field(default_factory=dict)


@dataclass
class VerifyConfig:
    name: str = "bound"
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    as_value: float = -1.0
    omega_factor: float = 0.35
    assumption_samples: int = 20000
    assumption_seed: int = 0
    out: str | None = None


@dataclass
class CompareConfig:
    name: str = "compare"
    env: EnvSection = field(default_factory=EnvSection)
    scenarios: list = field(default_factory=lambda: [{"kind": "none"}])
    model: ModelSection = field(default_factory=ModelSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    l1: L1Section = field(default_factory=L1Section)
    loop: LoopSection = field(default_factory=LoopSection)
    sim_to_real: bool = False
    eval_episodes: int = 4
    seeds: list = field(default_factory=lambda: [0])
    out: str | None = None
    report_window: int = 5


_SECTION_TYPES = {EnvSection, DistSection, ModelSection, MpcSection, L1Section, LoopSection, SyntheticSection}


def _from_dict(cls, data, path="config"):
    """Build a config dataclass, rejecting unknown keys at every level."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}; allowed: {sorted(fields)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        if f.type in ("EnvSection", "DistSection", "ModelSection", "MpcSection", "L1Section", "LoopSection", "SyntheticSection"):
            section_cls = next(t for t in _SECTION_TYPES if t.__name__ == f.type)
            kwargs[name] = _from_dict(section_cls, data[name], f"{path}.{name}")
        else:
            kwargs[name] = data[name]
    return cls(**kwargs)


def load_config(cls, path: str | Path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return _from_dict(cls, raw, path=str(path))


def resolve_run_config(cfg: RunConfig) -> RunConfig:
    """Fill in environment-dependent defaults; validate eagerly."""
    env = make_env(cfg.env.name, cfg.env.overrides)
    DisturbanceSpec(**dataclasses.asdict(cfg.disturbance))
    if cfg.l1.eps_a is None:
        cfg.l1.eps_a = EPS_A_DEFAULTS.get(cfg.env.name, 0.3)
    default_l1_config(env.n, env.dt, cfg.l1.eps_a, cfg.l1.as_value, cfg.l1.omega_factor)
    MpcConfig(horizon=cfg.mpc.horizon, n_candidates=cfg.mpc.n_candidates)
    LoopConfig(
        iterations=cfg.loop.iterations,
        episodes_per_iteration=cfg.loop.episodes_per_iteration,
        eval_episodes=cfg.loop.eval_episodes,
        l1_train=cfg.loop.l1_train,
        l1_test=cfg.loop.l1_test,
        l1_warmup_iterations=cfg.loop.l1_warmup_iterations,
    )
    if not cfg.seeds:
        raise ConfigError("seeds list must not be empty")
    if cfg.out is None:
        cfg.out = f"runs/{cfg.name}"
    return cfg


def out_dir(path_str: str) -> Path:
    path = Path(path_str)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_meta(directory: Path, cfg, extra: dict | None = None) -> None:
    meta = {"version": __version__, "config": dataclasses.asdict(cfg)}
    if extra:
        meta.update(extra)
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- run --------------------------------------------------------------------


def _build_pieces(cfg: RunConfig):
    env = make_env(cfg.env.name, cfg.env.overrides)
    dist = DisturbanceSpec(**dataclasses.asdict(cfg.disturbance))
    mpc = MpcConfig(horizon=cfg.mpc.horizon, n_candidates=cfg.mpc.n_candidates)
    l1cfg = default_l1_config(env.n, env.dt, cfg.l1.eps_a, cfg.l1.as_value, cfg.l1.omega_factor)
    loop = LoopConfig(
        iterations=cfg.loop.iterations,
        episodes_per_iteration=cfg.loop.episodes_per_iteration,
        eval_episodes=cfg.loop.eval_episodes,
        l1_train=cfg.loop.l1_train,
        l1_test=cfg.loop.l1_test,
        l1_warmup_iterations=cfg.loop.l1_warmup_iterations,
    )
    opts = TrainOptions(
        lr=cfg.model.lr,
        batch_size=cfg.model.batch_size,
        max_epochs=cfg.model.max_epochs,
        patience=cfg.model.patience,
        val_fraction=cfg.model.val_fraction,
        min_rows=cfg.model.min_rows,
    )
    return env, dist, mpc, l1cfg, loop, opts


def _run_one_seed(cfg_dict: dict, seed: int) -> RunRecord:
    cfg = _from_dict(RunConfig, cfg_dict)
    env, dist, mpc, l1cfg, loop, opts = _build_pieces(cfg)
    record, _ = train_loop(
        env, dist, loop, mpc, l1cfg, train_opts=opts,
        members=cfg.model.members, hidden=tuple(cfg.model.hidden), seed=seed,
    )
    return record


def _emit_run_outputs(directory: Path, cfg: RunConfig, records: list[tuple[int, RunRecord]]) -> None:
    if not records:
        return
    n, m = records[0][1].n, records[0][1].m
    merged = RunRecord(n=n, m=m)
    curve_rows = []
    for seed, record in records:
        merged.trace.extend(record.trace)
        merged.episodes.extend(record.episodes)
        merged.iteration_losses.extend(dict(row, seed=seed) for row in record.iteration_losses)
        for iteration in sorted(record.eval_returns):
            returns = record.eval_returns[iteration]
            curve_rows.append([
                str(iteration), str(seed),
                repr(float(np.mean(returns))), repr(float(np.std(returns))),
            ])
    merged.write_trace_csv(directory / "trace.csv")
    merged.write_episodes_csv(directory / "episodes.csv")
    with open(directory / "learning_curve.csv", "w", newline="") as fh:
        fh.write("iteration,seed,mean_return,std_return\n")
        for row in curve_rows:
            fh.write(",".join(row) + "\n")
    _write_meta(directory, cfg, {"losses": _jsonable(list(merged.iteration_losses))})


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _grid_variants(cfg: RunConfig) -> list[RunConfig]:
    variants = []
    for l1_train in (False, True):
        for l1_test in (False, True):
            sub = _from_dict(RunConfig, dataclasses.asdict(cfg))
            sub.loop.l1_train = l1_train
            sub.loop.l1_test = l1_test
            sub.ablation_grid = False
            tag = f"l1_{'on' if l1_train else 'off'}_{'on' if l1_test else 'off'}"
            sub.name = f"{cfg.name}_{tag}"
            sub.out = str(Path(cfg.out) / tag)
            variants.append(sub)
    return variants


@click.group()
@click.version_option(version=__version__)
def main():
    """Adaptive-augmentation experiments for model-based RL."""


def _seeds(cfg, seed_override: tuple[int, ...]):
    return [int(s) for s in (seed_override if seed_override else cfg.seeds)]


@main.command("run")
@click.argument("config_path", type=click.Path())
@click.option("--seed-override", "-s", multiple=True, type=int, help="Replace the config seed list.")
@click.option("--out", "out_override", default=None, help="Override the output directory.")
@click.option("--jobs", default=1, show_default=True, help="Worker processes across seeds.")
def cmd_run(config_path, seed_override, out_override, jobs):
    """Execute the train-and-evaluate loop for every seed in the config."""
    try:
        cfg = resolve_run_config(load_config(RunConfig, config_path))
        if out_override:
            cfg.out = out_override
        cfg.seeds = _seeds(cfg, seed_override)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    configs = _grid_variants(cfg) if cfg.ablation_grid else [cfg]
    for sub in configs:
        directory = out_dir(sub.out)
        records: list[tuple[int, RunRecord]] = []
        try:
            cfg_dict = dataclasses.asdict(sub)
            if jobs > 1 and len(sub.seeds) > 1:
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    futures = [(seed, pool.submit(_run_one_seed, cfg_dict, seed)) for seed in sub.seeds]
                    for seed, fut in futures:
                        records.append((seed, fut.result()))
            else:
                for seed in sub.seeds:
                    records.append((seed, _run_one_seed(cfg_dict, seed)))
        except Exception:
            _emit_run_outputs(directory, sub, records)
            click.echo("runtime abort; partial outputs flushed", err=True)
            traceback.print_exc()
            sys.exit(EXIT_RUNTIME)
        _emit_run_outputs(directory, sub, records)
        click.echo(f"wrote {directory}")
    sys.exit(EXIT_OK)


# --- verify -------------------------------------------------------------------


@main.command("verify")
@click.argument("config_path", type=click.Path())
@click.option("--out", "out_override", default=None, help="Override the output directory.")
def cmd_verify(config_path, out_override):
    """Run the estimation-error bound experiment across the sampling grid."""
    try:
        cfg = load_config(VerifyConfig, config_path)
        if cfg.out is None:
            cfg.out = f"runs/{cfg.name}"
        if out_override:
            cfg.out = out_override
        params = dict(cfg.synthetic.params)
        if "ts_grid" in params:
            params["ts_grid"] = tuple(params["ts_grid"])
        spec = make_synthetic_spec(cfg.synthetic.preset, **params)
    except (ConfigError, TypeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    directory = out_dir(cfg.out)
    try:
        report = run_ts_grid(spec, as_value=cfg.as_value, omega_factor=cfg.omega_factor)
        assumption = check_assumption_bound(
            spec, cfg.assumption_samples, np.random.default_rng(cfg.assumption_seed)
        )
        report["assumption"] = assumption
        report["pass"] = bool(report["pass"] and assumption["passed"])
        with open(directory / "bound_report.json", "w") as fh:
            json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_meta(directory, cfg)
    except Exception:
        traceback.print_exc()
        sys.exit(EXIT_RUNTIME)

    for row in report["per_ts"]:
        if row["switch_storm"]:
            click.echo(
                f"warning: switch storm at ts={row['ts']:g} "
                f"({row['switch_count']}/{row['n_intervals']} intervals); consider raising eps_a",
                err=True,
            )
    click.echo(f"wrote {directory / 'bound_report.json'} (pass={report['pass']})")
    sys.exit(EXIT_OK if report["pass"] else EXIT_CRITERION)


# --- compare ------------------------------------------------------------------


def _final_window_mean(record: RunRecord, window: int) -> float:
    ordered = [r for it in sorted(record.eval_returns) for r in record.eval_returns[it]]
    tail = ordered[-window:] if window > 0 else ordered
    return float(np.mean(tail))


def _compare_cell(cfg_dict: dict, scenario: dict, seed: int, use_l1: bool) -> float:
    """Final-window return for one (scenario, seed, arm) cell."""
    cfg = _from_dict(CompareConfig, cfg_dict)
    env = make_env(cfg.env.name, cfg.env.overrides)
    mpc = MpcConfig(horizon=cfg.mpc.horizon, n_candidates=cfg.mpc.n_candidates)
    eps_a = cfg.l1.eps_a if cfg.l1.eps_a is not None else EPS_A_DEFAULTS.get(cfg.env.name, 0.3)
    l1cfg = default_l1_config(env.n, env.dt, eps_a, cfg.l1.as_value, cfg.l1.omega_factor)
    opts = TrainOptions(
        lr=cfg.model.lr, batch_size=cfg.model.batch_size, max_epochs=cfg.model.max_epochs,
        patience=cfg.model.patience, val_fraction=cfg.model.val_fraction, min_rows=cfg.model.min_rows,
    )
    scenario_dist = DisturbanceSpec(**scenario)

    if cfg.sim_to_real:
        # Train clean without augmentation, then deploy on the disturbed system.
        train_dist = DisturbanceSpec(kind="none")
        loop = LoopConfig(
            iterations=cfg.loop.iterations,
            episodes_per_iteration=cfg.loop.episodes_per_iteration,
            eval_episodes=cfg.loop.eval_episodes,
            l1_train=False, l1_test=False,
        )
        _, model = train_loop(env, train_dist, loop, mpc, l1cfg, train_opts=opts,
                              members=cfg.model.members, hidden=tuple(cfg.model.hidden), seed=seed)
        returns = []
        for ep in range(cfg.eval_episodes):
            result = run_episode(env, scenario_dist, model, mpc, l1cfg, use_l1,
                                 episode_rng(seed, 10_000, ep, PHASE_EVAL))
            returns.append(result.episode_return)
        return float(np.mean(returns))

    loop = LoopConfig(
        iterations=cfg.loop.iterations,
        episodes_per_iteration=cfg.loop.episodes_per_iteration,
        eval_episodes=cfg.loop.eval_episodes,
        l1_train=use_l1, l1_test=use_l1,
        l1_warmup_iterations=cfg.loop.l1_warmup_iterations,
    )
    record, _ = train_loop(env, scenario_dist, loop, mpc, l1cfg, train_opts=opts,
                           members=cfg.model.members, hidden=tuple(cfg.model.hidden), seed=seed)
    return _final_window_mean(record, cfg.report_window)


def _sign_test_p(wins: int, losses: int) -> float:
    """Two-sided exact binomial p-value for a paired sign test."""
    n = wins + losses
    if n == 0:
        return 1.0
    k = max(wins, losses)
    tail = sum(math.comb(n, i) for i in range(k, n + 1)) / 2**n
    return min(1.0, 2.0 * tail)


@main.command("compare")
@click.argument("config_path", type=click.Path())
@click.option("--seed-override", "-s", multiple=True, type=int, help="Replace the config seed list.")
@click.option("--out", "out_override", default=None, help="Override the output directory.")
@click.option("--jobs", default=1, show_default=True, help="Worker processes across cells.")
def cmd_compare(config_path, seed_override, out_override, jobs):
    """Paired baseline-vs-augmented runs per scenario on shared seeds."""
    try:
        cfg = load_config(CompareConfig, config_path)
        if cfg.out is None:
            cfg.out = f"runs/{cfg.name}"
        if out_override:
            cfg.out = out_override
        cfg.seeds = _seeds(cfg, seed_override)
        if not cfg.seeds:
            raise ConfigError("seeds list must not be empty")
        if not cfg.scenarios:
            raise ConfigError("scenarios list must not be empty")
        scenarios = [dict(s) for s in cfg.scenarios]
        for s in scenarios:
            DisturbanceSpec(**s)
        make_env(cfg.env.name, cfg.env.overrides)
    except (ConfigError, TypeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    directory = out_dir(cfg.out)
    cfg_dict = dataclasses.asdict(cfg)
    cells = [(si, scenario, seed, use_l1)
             for si, scenario in enumerate(scenarios)
             for seed in cfg.seeds
             for use_l1 in (False, True)]
    results: dict[tuple[int, int, bool], float] = {}
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {(si, seed, use_l1): pool.submit(_compare_cell, cfg_dict, scenario, seed, use_l1)
                           for si, scenario, seed, use_l1 in cells}
                results = {key: fut.result() for key, fut in futures.items()}
        else:
            for si, scenario, seed, use_l1 in cells:
                results[(si, seed, use_l1)] = _compare_cell(cfg_dict, scenario, seed, use_l1)
    except Exception:
        traceback.print_exc()
        sys.exit(EXIT_RUNTIME)

    def scenario_label(s: dict) -> str:
        bits = [s.get("kind", "none")]
        for key in ("amplitude", "frequency", "sigma_a", "sigma_o"):
            if s.get(key):
                bits.append(f"{key}={s[key]:g}")
        return "_".join(bits)

    lines = ["scenario,arm,mean_return,std_return,n_seeds,l1_wins,l1_losses,sign_p"]
    for si, scenario in enumerate(scenarios):
        base = [results[(si, seed, False)] for seed in cfg.seeds]
        aug = [results[(si, seed, True)] for seed in cfg.seeds]
        wins = sum(a > b for a, b in zip(aug, base))
        losses = sum(a < b for a, b in zip(aug, base))
        p = _sign_test_p(wins, losses)
        label = scenario_label(scenario)
        for arm, vals in (("baseline", base), ("l1", aug)):
            lines.append(
                f"{label},{arm},{float(np.mean(vals))!r},{float(np.std(vals))!r},{len(vals)},{wins},{losses},{p!r}"
            )
    with open(directory / "comparison.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_meta(directory, cfg)
    click.echo(f"wrote {directory / 'comparison.csv'}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
