"""Command-line entry point: ``fairflow {train,eval,probe,replay}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures at run time.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import evalkit
from .flowgen import EnvSampler, ScenarioSpec, scenario_from_dict
from .neural import CheckpointError, load_checkpoint
from .simnet import ConfigError
from .trainer import LOCAL_DIM, TrainerConfig, run_training

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    sampler: EnvSampler = field(default_factory=EnvSampler)
    scenarios: list[ScenarioSpec] | None = None
    out_dir: str = "runs/train"


_TUPLE_KEYS = {"coeffs", "hidden", "bandwidth_range", "rtt_range", "buffer_factor_range",
               "flow_count_range"}


def _section(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in doc.items():
        if k not in names:
            raise ConfigError(f"unknown key {where}.{k}")
        default = getattr(cls(), k)
        try:
            if k in _TUPLE_KEYS:
                v = tuple(type(default[0])(x) for x in v)
                if len(v) != len(default) and k not in ("hidden",):
                    raise ValueError(f"expected {len(default)} values")
            elif isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ValueError("expected true or false")
            elif isinstance(default, int):
                if isinstance(v, bool) or float(v) != int(float(v)):
                    raise ValueError("expected an integer")
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.{k}: {exc}") from None
        kwargs[k] = v
    return cls(**kwargs)


def _check_range(where: str, pair, positive: bool = True) -> None:
    lo, hi = pair
    if lo > hi or (positive and lo <= 0):
        raise ConfigError(f"{where}: need 0 < min <= max, got {list(pair)}")


def parse_config(doc: dict | None) -> CliConfig:
    """Build a :class:`CliConfig` from a parsed document, rejecting unknown keys."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {"trainer", "sampler", "scenarios", "output"}
    for k in doc:
        if k not in allowed:
            raise ConfigError(f"unknown key {k}")
    trainer = _section(TrainerConfig, doc.get("trainer"), "trainer")
    try:
        trainer.validate()
    except ValueError as exc:
        raise ConfigError(f"trainer: {exc}") from None
    sampler = _section(EnvSampler, doc.get("sampler"), "sampler")
    for name in ("bandwidth_range", "rtt_range", "buffer_factor_range", "flow_count_range"):
        _check_range(f"sampler.{name}", getattr(sampler, name))
    if not sampler.horizon > 0:
        raise ConfigError("sampler.horizon must be positive")
    scenarios = None
    if doc.get("scenarios") is not None:
        scenarios = []
        for i, s in enumerate(doc["scenarios"]):
            try:
                scenarios.append(scenario_from_dict(s))
            except ConfigError as exc:
                raise ConfigError(f"scenarios[{i}]: {exc}") from None
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"scenarios[{i}]: missing or malformed field {exc}") from None
    out = doc.get("output") or {}
    for k in out:
        if k != "dir":
            raise ConfigError(f"unknown key output.{k}")
    return CliConfig(trainer, sampler, scenarios, str(out.get("dir", "runs/train")))


def load_config(path) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(doc)


def default_config_dict() -> dict:
    """The full default configuration as a plain document."""
    def plain(obj):
        d = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d
    c = CliConfig()
    return {"trainer": plain(c.trainer), "sampler": plain(c.sampler), "scenarios": None,
            "output": {"dir": c.out_dir}}


# -- commands -----------------------------------------------------------------------

def _load_actor(path):
    try:
        ckpt = load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (CheckpointError, ValueError, KeyError) as exc:
        raise CheckpointError(str(exc) or f"{path}: malformed checkpoint") from None
    actor = ckpt.nets.get("actor")
    if actor is None:
        raise CheckpointError(f"{path}: no actor network")
    if actor.input_dim != LOCAL_DIM:
        raise CheckpointError(f"{path}: actor input size {actor.input_dim}, expected {LOCAL_DIM}")
    return actor


def cmd_train(config_path, seed: int | None, out_dir, episodes: int | None = None,
              resume=None) -> int:
    cfg = load_config(config_path)
    trainer = cfg.trainer
    if seed is not None:
        trainer = replace(trainer, seed=seed)
    if episodes is not None:
        trainer = replace(trainer, episodes=episodes)
    sampler = replace(cfg.sampler, seed=trainer.seed)
    out = Path(out_dir or cfg.out_dir)
    if cfg.scenarios:
        fixed = cfg.scenarios
        scenarios = lambda ep, k: fixed[(ep * trainer.env_instances + k) % len(fixed)]  # noqa: E731
    else:
        from .trainer import default_scenarios
        scenarios = default_scenarios(sampler, trainer.seed)
    result = run_training(trainer, scenarios, out_dir=out, resume=resume)
    rewards = [float(np.mean(list(e.flow_returns.values()))) for e in result.episodes
               if e.flow_returns]
    final = rewards[-1] if rewards else float("nan")
    print(f"episodes={len({e.episode for e in result.episodes})} steps={result.step} "
          f"final_mean_episode_reward={final!r}")
    return EXIT_OK


def _parse_params(items) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise UsageError(f"--param expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = float(v)
    return out


def cmd_eval(checkpoint, scenario: str, reps: int, seed: int, out_dir, controller: str = "policy",
             time_scale: float = 1.0, params: dict | None = None) -> int:
    if scenario not in evalkit.SCENARIOS:
        raise UsageError(f"unknown scenario {scenario!r}; valid: {', '.join(evalkit.SCENARIOS)}")
    if reps < 1:
        raise UsageError("--reps must be >= 1")
    policy = None
    if controller == "policy":
        if checkpoint is None:
            raise UsageError("--checkpoint is required with --controller policy")
        policy = _load_actor(checkpoint)
    result = evalkit.run_scenario(scenario, policy, seed, reps, controller, time_scale, params)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in result.runs:
        evalkit.export_csv(run.rows, out / f"trace_seed{run.seed}.csv")
        evalkit.export_csv(run.report, out / f"report_seed{run.seed}.csv")
    s = result.summary()
    print(f"scenario={scenario} controller={controller} reps={reps} "
          f"mean_jain={s['mean_jain']!r} mean_convergence_s={s['mean_convergence_s']!r} "
          f"mean_stability_bps={s['mean_stability_bps']!r}")
    return EXIT_OK


def cmd_probe(checkpoint, out_path, thr_range=(10e6, 200e6), lat_range=(0.040, 0.200),
              grid=(50, 50), thr_max: float = 200e6, lat_min: float = 0.040) -> int:
    actor = _load_actor(checkpoint)
    try:
        pts = evalkit.probe_policy(actor, tuple(thr_range), tuple(lat_range), grid[0], grid[1],
                                   thr_max, lat_min)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    evalkit.export_csv(pts, out_path)
    print(f"wrote {len(pts)} probe points to {out_path}")
    return EXIT_OK


def cmd_replay(trace_path, out_path, capacity: float | None = None) -> int:
    try:
        rows = evalkit.read_trace_csv(trace_path)
    except OSError as exc:
        raise UsageError(f"cannot read trace {trace_path}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = evalkit.analyze(rows, capacity)
    evalkit.export_csv(report.events, out_path)
    print(f"events={len(report.events)} mean_jain={report.mean_jain!r}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fairflow", description="Multi-flow congestion control training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", help="YAML configuration file")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides output.dir)")
    t.add_argument("--episodes", type=int, help="override trainer.episodes")
    t.add_argument("--resume", help="directory of a previous run to continue")

    e = sub.add_parser("eval", help="run an evaluation scenario")
    e.add_argument("--checkpoint")
    e.add_argument("--scenario", required=True, choices=evalkit.SCENARIOS)
    e.add_argument("--reps", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--controller", choices=("policy", "aimd", "oracle-fair"), default="policy")
    e.add_argument("--time-scale", type=float, default=1.0,
                   help="multiply every flow start and duration")
    e.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="scenario parameter, e.g. fs1=8 or flows=20")

    r = sub.add_parser("probe", help="sweep the policy over throughput and delay")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True, help="output CSV path")
    r.add_argument("--thr-range", type=float, nargs=2, default=(10e6, 200e6), metavar=("LO", "HI"))
    r.add_argument("--lat-range", type=float, nargs=2, default=(0.040, 0.200), metavar=("LO", "HI"))
    r.add_argument("--grid", type=int, nargs=2, default=(50, 50), metavar=("N_THR", "N_LAT"))
    r.add_argument("--thr-max", type=float, default=200e6)
    r.add_argument("--lat-min", type=float, default=0.040)

    y = sub.add_parser("replay", help="compute metrics over an existing trace CSV")
    y.add_argument("trace")
    y.add_argument("--out", required=True, help="output report CSV path")
    y.add_argument("--capacity-bps", type=float,
                   help="bottleneck capacity used for fair shares (convergence needs it)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.seed, args.out, args.episodes, args.resume)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.scenario, args.reps, args.seed, args.out,
                            args.controller, args.time_scale, _parse_params(args.param))
        if args.command == "probe":
            return cmd_probe(args.checkpoint, args.out, args.thr_range, args.lat_range, args.grid,
                             args.thr_max, args.lat_min)
        return cmd_replay(args.trace, args.out, args.capacity_bps)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
