"""Linear-Gaussian guidance testbed with a closed-form answer.

A 1-D trajectory prior N(mean, cov) has an exact score at every noise level,
and conditioning it on exp(-weight * (x_k - target)^2) keeps it Gaussian, so
the conditional mean that guided samplers aim for is known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule


def smooth_covariance(n: int, length_scale: float = 4.0, variance: float = 0.25, jitter: float = 1e-6) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    cov = variance * np.exp(-0.5 * ((t[:, None] - t[None, :]) / length_scale) ** 2)
    return cov + jitter * np.eye(n)


class GaussianPrior:
    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self._precision: dict[float, np.ndarray] = {}

    @property
    def flat_dim(self) -> int:
        return len(self.mean)

    def _noised_precision(self, ab: float) -> np.ndarray:
        if ab not in self._precision:
            n = self.flat_dim
            self._precision[ab] = np.linalg.inv(ab * self.cov + (1.0 - ab) * np.eye(n))
        return self._precision[ab]

    def score_value(self, x: np.ndarray, ab: float) -> np.ndarray:
        return -(np.asarray(x) - np.sqrt(ab) * self.mean) @ self._noised_precision(ab)

    def score(self, x: ad.Node, schedule: NoiseSchedule, i: int, cond=None) -> ad.Node:
        ab = float(schedule.alpha_bar[i])
        shift = ad.constant(np.tile(np.sqrt(ab) * self.mean, (x.shape[0], 1)))
        return ad.matmul(x - shift, ad.constant(self._noised_precision(ab))) * -1.0


@dataclass
class CoordinateCost:
    """weight * (x_k - target)^2, summed over rows."""

    index: int
    target: float
    weight: float = 1.0

    def node(self, x: ad.Node) -> ad.Node:
        pick = np.zeros((x.shape[1], 1))
        pick[self.index, 0] = 1.0
        diff = ad.matmul(x, ad.constant(pick)) - ad.constant(np.full((x.shape[0], 1), self.target))
        return ad.sum(ad.mul(diff, diff)) * self.weight

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.weight * (np.asarray(x)[:, self.index] - self.target) ** 2


def conditional_mean(prior: GaussianPrior, cost: CoordinateCost) -> np.ndarray:
    """Mean of N(mean, cov) * exp(-cost), from the Gaussian observation update."""
    k = cost.index
    obs_var = 1.0 / (2.0 * cost.weight)
    gain = prior.cov[:, k] / (prior.cov[k, k] + obs_var)
    return prior.mean + gain * (cost.target - prior.mean[k])


def default_problem(n: int = 16, index: int = 12, target: float = 1.0, weight: float = 2.0):
    """Zero-mean smooth prior over ``n`` steps, pulled toward ``target`` at one step."""
    return GaussianPrior(np.zeros(n), smooth_covariance(n)), CoordinateCost(index, target, weight)


def mean_error(method: str, eta: float, seed: int, n_samples: int = 500, T: int = 50,
               problem=None) -> float:
    """Distance from the sample mean of ``n_samples`` draws to the exact conditional mean."""
    from .samplers import SamplerConfig, sample_batch
    from .diffusion import cosine_schedule

    prior, cost = problem or default_problem()
    cfg = SamplerConfig(method, None, n_samples, eta, False, seed)
    res = sample_batch(prior, cosine_schedule(T), cfg, guide=None if method == "unconstrained" else cost)
    mu = res.samples.reshape(n_samples, -1).mean(axis=0)
    return float(np.linalg.norm(mu - conditional_mean(prior, cost)))


def tune_eta(method: str, grid, seed: int, **kwargs) -> tuple[float, dict[float, float]]:
    """Grid point with the smallest mean error on ``seed`` (ties to the smaller scale)."""
    errors = {float(eta): mean_error(method, float(eta), seed, **kwargs) for eta in grid}
    errors = {k: (v if np.isfinite(v) else np.inf) for k, v in errors.items()}
    best = min(errors, key=lambda k: (errors[k], k))
    return best, errors
