"""Noise schedule, normalization and the closed-form pieces of the VP/DDPM chain.

Indexing is zero-based: step ``i`` in ``0..T-1`` is the ``i+1``-th noising
step, so ``alpha_bar[0]`` is the least noisy level and the clean trajectory
sits "before" index 0 (``alpha_bar_prev[0] == 1``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_sigma: np.ndarray
    timesteps: np.ndarray  # network time index used at each step

    @property
    def T(self) -> int:
        return len(self.beta)

    def check(self, i: int) -> None:
        if not 0 <= i < self.T:
            raise IndexError(f"diffusion step {i} outside [0, {self.T})")

    def posterior_coefficients(self, i: int) -> tuple[float, float]:
        """Weights of (tau_i, tau0_hat) in the DDPM posterior mean at step ``i``.

        sqrt(a_i) (1 - ab_{i-1}) / (1 - ab_i) and sqrt(ab_{i-1}) b_i / (1 - ab_i).
        Taking the square root of the whole ratios instead gives weights that
        sum above one and makes sampling diverge.
        """
        a, ab, abp, b = self.alpha[i], self.alpha_bar[i], self.alpha_bar_prev[i], self.beta[i]
        return float(np.sqrt(a) * (1 - abp) / (1 - ab)), float(np.sqrt(abp) * b / (1 - ab))


def _cosine_f(u: np.ndarray) -> np.ndarray:
    return np.cos((u + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2


def _from_alpha_bar(target: np.ndarray, timesteps: np.ndarray) -> NoiseSchedule:
    prev = np.concatenate([[1.0], target[:-1]])
    beta = np.minimum(1.0 - target / prev, MAX_BETA)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    post_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(beta, alpha, alpha_bar, alpha_bar_prev, np.sqrt(post_var), timesteps)


def cosine_schedule(T: int) -> NoiseSchedule:
    """Cosine schedule: alpha_bar_i = f(i+1)/f(0), betas clipped to 0.999."""
    if int(T) != T or T < 2:
        raise ConfigError(f"cosine schedule needs T >= 2 steps, got {T}")
    T = int(T)
    u = np.arange(T + 1) / T
    f = _cosine_f(u)
    return _from_alpha_bar(f[1:] / f[0], np.arange(T))


def restride(schedule: NoiseSchedule, T: int) -> NoiseSchedule:
    """Keep ``T`` evenly spaced levels of a trained schedule and recompute the ratios."""
    if T < 2:
        raise ConfigError(f"need at least 2 sampling steps, got {T}")
    if T >= schedule.T:
        return schedule
    idx = np.unique(np.round(np.linspace(0, schedule.T - 1, T)).astype(int))
    return _from_alpha_bar(schedule.alpha_bar[idx], schedule.timesteps[idx])


def schedule_from_dict(d: dict) -> NoiseSchedule:
    if d.get("kind", "cosine") != "cosine":
        raise ConfigError(f"unsupported schedule kind {d.get('kind')!r}")
    return cosine_schedule(int(d["T"]))


class Normalizer:
    """Per-state-dimension affine map of trajectories onto [-1, 1]."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ValueError("normalizer bounds must satisfy lo < hi per dimension")

    @classmethod
    def fit(cls, trajectories: np.ndarray, margin: float = 0.05) -> "Normalizer":
        data = np.asarray(trajectories, dtype=np.float64)
        flat = data.reshape(-1, data.shape[-1])
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        span = hi - lo
        span = np.where(span < 1e-9, 1.0, span)
        return cls(lo - margin * span, hi + margin * span)

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.hi + self.lo)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.center) / self.half_range

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.half_range + self.center

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["lo"], d["hi"])


def forward_noise(schedule: NoiseSchedule, tau0: np.ndarray, i: int, z: np.ndarray) -> np.ndarray:
    """Closed-form marginal sample tau_i = sqrt(ab_i) tau0 + sqrt(1 - ab_i) z."""
    schedule.check(i)
    tau0 = np.asarray(tau0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != tau0.shape:
        raise ad.DimensionError(f"noise shape {z.shape} differs from trajectory shape {tau0.shape}")
    ab = schedule.alpha_bar[i]
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * z


def predict_tau0(schedule: NoiseSchedule, tau_i: ad.Node, score: ad.Node, i: int) -> ad.Node:
    """One-shot clean estimate (tau_i + (1 - ab_i) * score) / sqrt(ab_i)."""
    ab = float(schedule.alpha_bar[i])
    return (tau_i + score * (1.0 - ab)) * (1.0 / np.sqrt(ab))


def gaussian_point_score(schedule: NoiseSchedule, tau_i, target, i: int):
    """Exact score of the noised marginal of a point mass at ``target``."""
    ab = schedule.alpha_bar[i]
    return -(np.asarray(tau_i) - np.sqrt(ab) * np.asarray(target)) / (1.0 - ab)
