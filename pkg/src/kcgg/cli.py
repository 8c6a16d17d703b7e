"""Command-line entry point: generate-data, train, evaluate, sweep.

Every command reads a strict JSON config. ``--seed`` overrides the config
seed and ``--out`` the output directory. Exit codes: 0 success, 1 bad
config or input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .config import ConfigValidationError, ExperimentConfig, load_config
from .demos import DemoGenerationError, DemoSet, generate_dataset, load_dataset, save_dataset
from .diffusion import ConfigError, Normalizer, cosine_schedule
from .harness import MetricsReport, evaluate, make_setup, sweep
from .kinematics import ArmSpecError
from .network import Architecture, Checkpoint, GaussianSkip, ScoreNetwork, load_checkpoint, save_checkpoint
from .sim import TableSpecError
from .training import TrainingError, train

log = logging.getLogger("kcgg")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
NULL_CONDITION = "none"


class InputError(ValueError):
    """A file a command needs is missing or does not match the config."""


def cmd_generate_data(cfg: ExperimentConfig) -> Path:
    env = cfg.make_env()
    demos = generate_dataset(env, cfg.data.n_per_style, cfg.seed)
    save_dataset(cfg.data_path, demos)
    log.info("wrote %d demos to %s", len(demos), cfg.data_path)
    return cfg.data_path


def _load_demos(cfg: ExperimentConfig) -> DemoSet:
    path = cfg.data_path
    if not path.exists():
        raise InputError(f"dataset {path} not found; run generate-data first")
    try:
        demos = load_dataset(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if demos.horizon != cfg.env.horizon:
        raise InputError(f"dataset horizon {demos.horizon} != config horizon {cfg.env.horizon}")
    return demos


def cmd_train(cfg: ExperimentConfig) -> tuple[Path, list[float]]:
    """Fit the normalizer and the network; writes the checkpoint and loss.csv."""
    demos = _load_demos(cfg)
    m = cfg.model
    trajs, labels = demos.trajectories, demos.labels
    if m.max_demos is not None:
        trajs, labels = trajs[: m.max_demos], labels[: m.max_demos]
    normalizer = Normalizer.fit(trajs)
    data = normalizer.normalize(trajs).reshape(len(trajs), -1)
    arch = Architecture(demos.horizon, trajs.shape[2], m.width, m.blocks, m.time_dim, m.cond_dim)
    net = ScoreNetwork.create(arch, (NULL_CONDITION,) + tuple(demos.styles), seed=cfg.seed)
    schedule = cosine_schedule(m.schedule_T)
    if m.gaussian_skip:
        net.skip = GaussianSkip.fit(data, schedule.alpha_bar)
    curve = train(
        net, data, schedule, m.epochs, m.lr, cfg.seed,
        labels=labels + 1, batch_size=m.batch_size, momentum=m.momentum, uncond_prob=m.uncond_prob,
        log_every=max(1, m.epochs // 10),
    )
    ckpt = Checkpoint(net, normalizer, m.schedule_T, demos.dt, {"seed": cfg.seed, "n_demos": len(trajs)})
    save_checkpoint(cfg.model_path, ckpt)
    loss_path = cfg.out_dir / "loss.csv"
    with open(loss_path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for k, v in enumerate(curve):
            w.writerow([k + 1, repr(v)])
    log.info("final loss %.5f; checkpoint %s", curve[-1], cfg.model_path)
    return cfg.model_path, curve


def _load_model(cfg: ExperimentConfig) -> Checkpoint:
    path = cfg.model_path
    if not path.exists():
        raise InputError(f"checkpoint {path} not found; run train first")
    try:
        ckpt = load_checkpoint(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if ckpt.net.arch.horizon != cfg.env.horizon:
        raise InputError("checkpoint horizon does not match the config")
    return ckpt


def _setup(cfg: ExperimentConfig, ckpt: Checkpoint, methods):
    ev = cfg.evaluation
    if ev.condition is not None and ev.condition not in ckpt.net.conditions:
        raise InputError(f"condition {ev.condition!r} not among {ckpt.net.conditions}")
    return make_setup(ckpt, cfg.make_env(), ev.n_episodes, cfg.seed, methods, ev.batch_size, ev.ms_per_step,
                      ev.calibration_episodes, ev.clip_denoised, ev.max_guidance_step)


def cmd_evaluate(cfg: ExperimentConfig, parallel: int = 1) -> MetricsReport:
    ckpt = _load_model(cfg)
    ev = cfg.evaluation
    setup = _setup(cfg, ckpt, ev.methods)
    report = evaluate(setup, ev.methods, ev.batch_size, ev.budget_ms, cfg.out_dir, ev.condition, parallel,
                      ev.record_traces)
    for r in report.rows:
        log.info("%-24s block rate %.3f [%.3f, %.3f] T=%d", r.method, r.block_rate, r.ci_low, r.ci_high, r.T)
    return report


def cmd_sweep(cfg: ExperimentConfig, parallel: int = 1) -> MetricsReport:
    ckpt = _load_model(cfg)
    ev = cfg.evaluation
    methods = [mc for mc in ev.methods if mc.name in ev.sweep_methods]
    setup = _setup(cfg, ckpt, methods)
    return sweep(setup, methods, ev.batch_size, ev.budgets_ms, cfg.out_dir, ev.condition, parallel)


COMMANDS = {
    "generate-data": lambda cfg, args: cmd_generate_data(cfg),
    "train": lambda cfg, args: cmd_train(cfg),
    "evaluate": lambda cfg, args: cmd_evaluate(cfg, args.parallel),
    "sweep": lambda cfg, args: cmd_sweep(cfg, args.parallel),
}


class _Parser(argparse.ArgumentParser):
    """Usage errors count as validation errors (exit 1), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kcgg", description="Constraint-guided trajectory diffusion experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate-data", "generate scripted-expert demonstrations"),
        ("train", "train the noise-prediction network"),
        ("evaluate", "compare sampling methods on shared defend episodes"),
        ("sweep", "block rate across sampling-time budgets"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--parallel", type=int, default=1, help="worker processes for episodes (default 1)")
    return parser


def setup_logging() -> None:
    level = os.environ.get("KCGG_LOG_LEVEL", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigValidationError(f"KCGG_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def load_with_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(Path(args.out).resolve())
    if args.parallel < 1:
        raise ConfigValidationError("--parallel must be >= 1")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        cfg = load_with_overrides(args)
    except ConfigValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg, args)
    except (ConfigValidationError, ConfigError, ArmSpecError, TableSpecError, InputError) as exc:
        log.error("%s", exc)
        return 1
    except (DemoGenerationError, TrainingError, RuntimeError, FloatingPointError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 2
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
