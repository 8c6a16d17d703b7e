"""Experiment harness: diffusion planners in the defend task, metrics and sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist, median

import numpy as np

from .constraints import StrikeConstraint, StrikeCost, cost_forward
from .diffusion import NoiseSchedule, restride
from .network import Checkpoint
from .samplers import SamplerConfig, sample_batch, time_budget_steps
from .sim import (
    DefendEnv,
    EpisodeResult,
    PuckState,
    block_rate,
    episode_set,
    execute_plan,
    run_eval,
    write_trace,
)

log = logging.getLogger(__name__)

TIMING_KEYS = ("ms_per_step", "step_ms", "plan_latency_ms")


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the bounds are exactly 0 and 1 at the extremes; rounding can miss them
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return lo, hi


class DiffusionPlanner:
    """Plans one defend stroke by sampling the trained model.

    With no strike window (infeasible episode) guided methods fall back to
    unconstrained sampling, since there is nothing to guide toward.
    """

    def __init__(self, ckpt: Checkpoint, env: DefendEnv, method: str, T: int, batch_size: int,
                 guidance_scale: float, batch_filter: bool, condition: str | None = None,
                 clip_denoised: float | None = 1.0, max_guidance_step: float | None = None):
        self.ckpt = ckpt
        self.env = env
        self.method = method
        self.T = T
        self.batch_size = batch_size
        self.guidance_scale = guidance_scale
        self.batch_filter = batch_filter
        self.condition = condition
        self.clip_denoised = clip_denoised
        self.max_guidance_step = max_guidance_step
        self.schedule: NoiseSchedule = restride(ckpt.schedule, T)

    def __call__(self, puck: PuckState, constraint: StrikeConstraint | None, seed: int):
        method = self.method if constraint is not None else "unconstrained"
        cfg = SamplerConfig(method, None, self.batch_size, self.guidance_scale, self.batch_filter, seed,
                            self.clip_denoised, self.max_guidance_step)
        guide = None
        if constraint is not None:
            guide = StrikeCost(constraint, self.env.arm, self.ckpt.normalizer, self.env.horizon)
        res = sample_batch(self.ckpt.net, self.schedule, cfg, self.condition, guide,
                           normalizer=self.ckpt.normalizer, horizon=self.env.horizon)
        diag = res.diagnostics()
        diag["method"] = self.method
        if constraint is not None:
            diag["plan_cost"] = float(cost_forward(constraint, self.env.arm, res.best))
        return res.best, diag


@dataclass
class MethodMetrics:
    method: str
    block_rate: float
    ci_low: float
    ci_high: float
    blocked: int
    feasible: int
    episodes: int
    failed: int
    mean_cost: float
    ms_per_step: float
    T: int
    B: int
    eta: float
    batch_filter: bool
    budget_ms: float

    def __post_init__(self):
        if not 0.0 <= self.block_rate <= 1.0:
            raise ValueError(f"block rate {self.block_rate} outside [0, 1]")
        if not self.ci_low <= self.block_rate <= self.ci_high:
            raise ValueError("confidence interval must bracket the block rate")


_FIELDS = [f.name for f in dataclasses.fields(MethodMetrics)]
_TYPES = {f.name: f.type for f in dataclasses.fields(MethodMetrics)}


def _parse(name: str, text: str):
    tp = _TYPES[name]
    if tp in ("int", int):
        return int(text)
    if tp in ("float", float):
        return float(text)
    if tp in ("bool", bool):
        if text not in ("true", "false"):
            raise ValueError(f"bad boolean {text!r} in column {name}")
        return text == "true"
    return text


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class MetricsReport:
    rows: list[MethodMetrics]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, k)) for k in _FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != _FIELDS:
            raise ValueError(f"unexpected metrics columns {header}")
        return cls([MethodMetrics(**{k: _parse(k, v) for k, v in zip(header, row)}) for row in reader])

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8", newline="\n")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))

    def by_method(self) -> dict[str, MethodMetrics]:
        return {r.method: r for r in self.rows}


def summarize(name: str, episodes: list[EpisodeResult], T: int, B: int, eta: float, batch_filter: bool,
              budget_ms: float) -> MethodMetrics:
    feasible = [e for e in episodes if e.feasible]
    blocked = sum(e.blocked for e in feasible)
    lo, hi = wilson_interval(blocked, len(feasible))
    costs = [e.diagnostics.get("plan_cost") for e in feasible if not e.failed]
    costs = [c for c in costs if c is not None]
    timing = [e.diagnostics["ms_per_step"] for e in episodes if "ms_per_step" in e.diagnostics]
    return MethodMetrics(
        method=name,
        block_rate=block_rate(episodes),
        ci_low=lo,
        ci_high=hi,
        blocked=int(blocked),
        feasible=len(feasible),
        episodes=len(episodes),
        failed=sum(e.failed for e in episodes),
        mean_cost=float(np.mean(costs)) if costs else float("nan"),
        ms_per_step=float(median(timing)) if timing else float("nan"),
        T=T,
        B=B,
        eta=eta,
        batch_filter=batch_filter,
        budget_ms=budget_ms,
    )


def calibrate_ms_per_step(ckpt: Checkpoint, env: DefendEnv, method: str, batch_size: int, eta: float,
                          pucks: list[PuckState], T: int = 10, seed: int = 0, clip_denoised: float | None = 1.0,
                          max_guidance_step: float | None = None) -> float:
    """Median wall-clock ms per denoising step; the first (warm-up) sample is discarded."""
    planner = DiffusionPlanner(ckpt, env, method, T, batch_size, eta, True, None, clip_denoised, max_guidance_step)
    timings = []
    for k, puck in enumerate([pucks[0]] + list(pucks)):
        constraint = env.constraint_for(puck)
        if constraint is None and method != "unconstrained":
            continue
        _, diag = planner(puck, constraint, seed + k)
        if k > 0:
            timings.append(diag["ms_per_step"])
    if not timings:
        raise RuntimeError("no feasible calibration episode for a guided method")
    return float(median(timings))


@dataclass
class EvalSetup:
    ckpt: Checkpoint
    env: DefendEnv
    pucks: list[PuckState]
    seed: int
    ms_per_step: dict[str, float]
    clip_denoised: float | None = 1.0
    max_guidance_step: float | None = None


def resolve_timing(setup: EvalSetup, methods, batch_size: int, pinned: dict[str, float],
                   calibration_episodes: int) -> dict[str, float]:
    out = {}
    for mc in methods:
        if mc.name in pinned:
            out[mc.name] = float(pinned[mc.name])
        else:
            out[mc.name] = calibrate_ms_per_step(
                setup.ckpt, setup.env, mc.method, batch_size, mc.guidance_scale,
                setup.pucks[:calibration_episodes], seed=setup.seed, clip_denoised=setup.clip_denoised,
                max_guidance_step=setup.max_guidance_step,
            )
            log.info("calibrated %s: %.3f ms/step", mc.name, out[mc.name])
    return out


def evaluate_method(setup: EvalSetup, mc, batch_size: int, budget_ms: float, condition=None,
                    parallel: int = 1) -> tuple[MethodMetrics, list[EpisodeResult]]:
    T = min(time_budget_steps(budget_ms, setup.ms_per_step[mc.name]), setup.ckpt.schedule_T)
    planner = DiffusionPlanner(setup.ckpt, setup.env, mc.method, T, batch_size, mc.guidance_scale,
                               mc.batch_filter, condition, setup.clip_denoised, setup.max_guidance_step)
    _, episodes = run_eval(setup.env, planner, len(setup.pucks), setup.seed, setup.pucks, parallel)
    metrics = summarize(mc.name, episodes, T, batch_size, mc.guidance_scale, mc.batch_filter, budget_ms)
    log.info("%s @ %.0f ms: T=%d block rate %.3f [%.3f, %.3f]", mc.name, budget_ms, T, metrics.block_rate,
             metrics.ci_low, metrics.ci_high)
    return metrics, episodes


def _diag_rows(name: str, budget_ms: float, episodes: list[EpisodeResult]) -> list[dict]:
    rows = []
    for k, e in enumerate(episodes):
        row = {"method": name, "budget_ms": budget_ms, "episode": k}
        row.update(e.summary())
        row.update({key: val for key, val in e.diagnostics.items() if key != "method"})
        rows.append(row)
    return rows


def write_jsonl(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def strip_timing(row: dict) -> dict:
    return {k: v for k, v in row.items() if k not in TIMING_KEYS}


def make_setup(ckpt: Checkpoint, env: DefendEnv, n_episodes: int, seed: int, methods, batch_size: int,
               pinned: dict[str, float], calibration_episodes: int, clip_denoised: float | None = 1.0,
               max_guidance_step: float | None = None) -> EvalSetup:
    pucks = episode_set(env, n_episodes, seed)
    setup = EvalSetup(ckpt, env, pucks, seed, {}, clip_denoised, max_guidance_step)
    setup.ms_per_step = resolve_timing(setup, methods, batch_size, pinned, calibration_episodes)
    return setup


def evaluate(setup: EvalSetup, methods, batch_size: int, budget_ms: float, out_dir, condition=None,
             parallel: int = 1, record_traces: bool = False) -> MetricsReport:
    """One CSV row per method over the shared episode set, plus JSON-lines diagnostics."""
    out_dir = Path(out_dir)
    rows, diags = [], []
    for mc in methods:
        metrics, episodes = evaluate_method(setup, mc, batch_size, budget_ms, condition, parallel)
        rows.append(metrics)
        diags.extend(_diag_rows(mc.name, budget_ms, episodes))
        if record_traces:
            for k, e in enumerate(episodes):
                # replay to collect the per-tick trace without resampling
                traced = execute_plan(setup.env, e.plan, setup.pucks[k], record=True)
                write_trace(out_dir / "traces" / f"{mc.name}_{k:04d}.jsonl", traced)
    report = MetricsReport(rows)
    report.write(out_dir / "metrics.csv")
    write_jsonl(out_dir / "diagnostics.jsonl", diags)
    (out_dir / "timing.json").write_text(json.dumps(setup.ms_per_step, indent=2, sort_keys=True) + "\n")
    return report


def sweep(setup: EvalSetup, methods, batch_size: int, budgets_ms: list[float], out_dir, condition=None,
          parallel: int = 1) -> MetricsReport:
    """Block rate per (method, budget); T at each budget comes from time_budget_steps."""
    out_dir = Path(out_dir)
    rows, diags = [], []
    for mc in methods:
        for budget in budgets_ms:
            metrics, episodes = evaluate_method(setup, mc, batch_size, budget, condition, parallel)
            rows.append(metrics)
            diags.extend(_diag_rows(mc.name, budget, episodes))
    report = MetricsReport(rows)
    report.write(out_dir / "sweep.csv")
    write_jsonl(out_dir / "sweep_diagnostics.jsonl", diags)
    (out_dir / "timing.json").write_text(json.dumps(setup.ms_per_step, indent=2, sort_keys=True) + "\n")
    return report


def tune_guidance(setup: EvalSetup, mc, grid, batch_size: int, budget_ms: float,
                  parallel: int = 1) -> tuple[float, dict[float, float]]:
    """Grid-search one method's guidance scale by block rate on ``setup``'s episodes.

    Meant for an episode set disjoint from the evaluation one. Ties go to
    the smaller scale. Returns the winner and the rate at every grid point.
    """
    rates = {}
    for eta in sorted(float(v) for v in grid):
        trial = dataclasses.replace(mc, guidance_scale=eta)
        metrics, _ = evaluate_method(setup, trial, batch_size, budget_ms, parallel=parallel)
        rates[eta] = metrics.block_rate
    best = max(rates, key=lambda k: (rates[k], -k))
    return best, rates
