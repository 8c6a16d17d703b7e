"""Reverse-diffusion samplers: plain DDPM, projection guidance and KCGG.

All three share one noise stream layout (initial draw, then one draw per
step), so with zero guidance they produce the same samples for a seed.
Batch rows get independent generators spawned from the seed, which makes a
row's sample independent of the batch size.

A ``model`` exposes ``score(x, schedule, i, cond) -> Node`` for a (B, D)
node in model space. A ``guide`` exposes ``node(x) -> scalar Node`` (summed
cost over rows) and ``values(x) -> (B,)`` costs.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import ConfigError, NoiseSchedule, Normalizer, predict_tau0, restride

METHODS = ("unconstrained", "projection", "kcgg")


@dataclass
class SamplerConfig:
    method: str = "kcgg"
    T: int | None = None  # None keeps the trained schedule
    batch_size: int = 1
    guidance_scale: float = 1.0
    batch_filter: bool = True
    seed: int = 0
    clip_denoised: float | None = None  # clip tau0_hat to [-c, c] in model space
    max_guidance_step: float | None = None  # cap on any entry of a guidance displacement

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown sampling method {self.method!r}; choose from {METHODS}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0")
        if self.T is not None and self.T < 2:
            raise ConfigError("T must be >= 2")
        if self.clip_denoised is not None and self.clip_denoised <= 0:
            raise ConfigError("clip_denoised must be > 0")
        if self.max_guidance_step is not None and self.max_guidance_step <= 0:
            raise ConfigError("max_guidance_step must be > 0")


class _Streams:
    def __init__(self, seed: int, rows: int):
        self.gens = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(rows)]

    def normal(self, dim: int) -> np.ndarray:
        return np.stack([g.standard_normal(dim) for g in self.gens])


def _posterior_mean(schedule: NoiseSchedule, tau_i: np.ndarray, tau0: np.ndarray, i: int, clip) -> np.ndarray:
    if clip is not None:
        tau0 = np.clip(tau0, -clip, clip)
    c1, c2 = schedule.posterior_coefficients(i)
    return c1 * tau_i + c2 * tau0


def _score_step_mean(model, schedule: NoiseSchedule, tau_i: np.ndarray, i: int, cond, clip=None) -> np.ndarray:
    """(tau_i + (1 - a_i) s) / sqrt(a_i).

    With ``clip`` the same mean is formed as the posterior mean of a clipped
    clean estimate; without clipping the two forms agree exactly.
    """
    s = model.score(ad.constant(tau_i), schedule, i, cond).value
    if clip is not None:
        ab = schedule.alpha_bar[i]
        return _posterior_mean(schedule, tau_i, (tau_i + (1.0 - ab) * s) / np.sqrt(ab), i, clip)
    a = schedule.alpha[i]
    return (tau_i + (1.0 - a) * s) / np.sqrt(a)


def clip_node(x: ad.Node, bound: float) -> ad.Node:
    """Differentiable clip to [-bound, bound]; clipped entries pass no gradient."""
    v = x.value
    inside = (np.abs(v) <= bound).astype(np.float64)
    return ad.mul(x, ad.constant(inside)) + ad.constant(np.sign(v) * bound * (1.0 - inside))


def _capped(step: np.ndarray, cap: float | None) -> np.ndarray:
    """Scale each row down so its largest entry is at most ``cap``."""
    if cap is None:
        return step
    peak = np.abs(step).max(axis=1, keepdims=True)
    return step * np.minimum(1.0, cap / np.maximum(peak, 1e-300))


def _noise(schedule: NoiseSchedule, i: int, z: np.ndarray) -> np.ndarray | float:
    return schedule.posterior_sigma[i] * z if i > 0 else 0.0


def ddpm_step(
    model, schedule: NoiseSchedule, tau_i: np.ndarray, i: int, cond, z: np.ndarray, clip: float | None = None
) -> np.ndarray:
    """tau_{i-1} = (tau_i + (1 - a_i) s) / sqrt(a_i) + sigma_i z; no noise at i == 0."""
    return _score_step_mean(model, schedule, tau_i, i, cond, clip) + _noise(schedule, i, z)


def projection_step(
    model,
    schedule: NoiseSchedule,
    tau_i: np.ndarray,
    i: int,
    cond,
    z: np.ndarray,
    guide,
    scale: float = 1.0,
    clip: float | None = None,
    cap: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Denoise, then step against the cost gradient taken at the noisy mean."""
    mean = _score_step_mean(model, schedule, tau_i, i, cond, clip)
    grad = np.zeros_like(mean)
    if scale > 0:
        leaf = ad.variable(mean)
        ad.backward(guide.node(leaf))
        grad = leaf.grad
    return mean - _capped(scale * grad, cap) + _noise(schedule, i, z), grad


def kcgg_step(
    model,
    schedule: NoiseSchedule,
    tau_i: np.ndarray,
    i: int,
    cond,
    z: np.ndarray,
    guide,
    scale: float = 1.0,
    clip: float | None = None,
    cap: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean step, then step against d c(tau0_hat) / d tau_i.

    The gradient runs through the clean estimate, i.e. through the score
    model and the guide (kinematics included). The step size is
    ``scale * (1 - alpha_bar_i)``. With ``clip`` both the mean and the cost
    use the clipped estimate, so clipped entries pass no gradient. ``cap``
    bounds the per-row guidance displacement (both guided methods take it).
    """
    leaf = ad.variable(tau_i) if scale > 0 else ad.constant(tau_i)
    s = model.score(leaf, schedule, i, cond)
    tau0 = predict_tau0(schedule, leaf, s, i)
    if clip is not None:
        tau0 = clip_node(tau0, clip)
    mean = _posterior_mean(schedule, tau_i, tau0.value, i, None)
    grad = np.zeros_like(tau_i)
    if scale > 0:
        ad.backward(guide.node(tau0))
        grad = leaf.grad
    step = scale * (1.0 - schedule.alpha_bar[i])
    return mean + _noise(schedule, i, z) - _capped(step * grad, cap), grad


@dataclass
class SampleResult:
    best: np.ndarray  # chosen trajectory, physical units, (H+1, d)
    samples: np.ndarray  # (B, H+1, d) physical units
    costs: np.ndarray | None
    chosen: int
    ms_per_step: float
    steps: int
    config: SamplerConfig
    step_ms: list[float] = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "method": self.config.method,
            "T": self.steps,
            "B": self.config.batch_size,
            "eta": self.config.guidance_scale,
            "batch_filter": self.config.batch_filter,
            "seed": self.config.seed,
            "clip_denoised": self.config.clip_denoised,
            "max_guidance_step": self.config.max_guidance_step,
            "ms_per_step": self.ms_per_step,
            "step_ms": self.step_ms,
            "costs": None if self.costs is None else [float(c) for c in self.costs],
            "chosen": self.chosen,
        }


def sample_batch(
    model,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    cond=None,
    guide=None,
    *,
    normalizer: Normalizer | None = None,
    horizon: int | None = None,
) -> SampleResult:
    """Draw ``batch_size`` trajectories and return the filtered best one.

    With ``batch_filter`` and a guide, the row of least cost wins (lowest
    index on ties); otherwise row 0 is returned.
    """
    if config.method != "unconstrained" and guide is None:
        raise ConfigError(f"method {config.method!r} needs a constraint")
    sched = restride(schedule, config.T) if config.T is not None else schedule
    dim = model.flat_dim
    B = config.batch_size
    streams = _Streams(config.seed, B)
    x = streams.normal(dim)
    step_ms: list[float] = []
    for i in range(sched.T - 1, -1, -1):
        z = streams.normal(dim)
        t0 = time.perf_counter()
        if config.method == "unconstrained":
            x = ddpm_step(model, sched, x, i, cond, z, config.clip_denoised)
        elif config.method == "projection":
            x, _ = projection_step(
                model, sched, x, i, cond, z, guide, config.guidance_scale, config.clip_denoised,
                config.max_guidance_step,
            )
        else:
            x, _ = kcgg_step(
                model, sched, x, i, cond, z, guide, config.guidance_scale, config.clip_denoised,
                config.max_guidance_step,
            )
        step_ms.append(1e3 * (time.perf_counter() - t0))

    costs = guide.values(x) if guide is not None else None
    chosen = int(np.argmin(costs)) if (config.batch_filter and costs is not None) else 0
    rows = x.reshape(B, horizon or dim, -1)
    phys = normalizer.denormalize(rows) if normalizer is not None else rows
    return SampleResult(
        best=phys[chosen],
        samples=phys,
        costs=costs,
        chosen=chosen,
        ms_per_step=float(np.sum(step_ms) / sched.T),
        steps=sched.T,
        config=config,
        step_ms=step_ms,
    )


def time_budget_steps(budget_ms: float, ms_per_step: float) -> int:
    """Largest T with T * ms_per_step <= budget, floored at 2."""
    if budget_ms <= 0:
        raise ConfigError("time budget must be > 0")
    if ms_per_step <= 0:
        raise ConfigError("ms per step must be > 0")
    return max(2, int(math.floor(budget_ms / ms_per_step + 1e-9)))


def config_dict(config: SamplerConfig) -> dict:
    return asdict(config)
