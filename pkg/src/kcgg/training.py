"""Epsilon-matching training with SGD + momentum."""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, forward_noise
from .network import ScoreNetwork

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def eps_loss(pred: ad.Node, z: np.ndarray, reduction: str = "mean") -> ad.Node:
    """Squared error between predicted and true noise.

    ``"mean"`` averages over every entry; ``"sum"`` gives the per-sample
    squared norm averaged over the batch.
    """
    diff = pred - ad.constant(z)
    sq = ad.sum(ad.mul(diff, diff))
    if reduction == "mean":
        return sq * (1.0 / z.size)
    if reduction == "sum":
        return sq * (1.0 / z.shape[0])
    raise ValueError(f"unknown reduction {reduction!r}")


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    if n <= batch_size:
        reps = -(-batch_size // n)
        return [np.tile(perm, reps)[:batch_size]]
    return [perm[k : k + batch_size] for k in range(0, n, batch_size)]


def train(
    net: ScoreNetwork,
    data: np.ndarray,
    schedule: NoiseSchedule,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    *,
    labels: np.ndarray | None = None,
    batch_size: int = 32,
    momentum: float = 0.9,
    uncond_prob: float = 0.0,
    reduction: str = "sum",
    log_every: int = 0,
) -> list[float]:
    """Train ``net`` in place on normalized, flattened trajectories ``data`` (N, D).

    ``labels`` are condition indices; with ``uncond_prob > 0`` each sample's
    label is replaced by index 0 with that probability so the same network
    also learns the unconditional prior. The gradient comes from the
    ``reduction`` form of the loss; the returned per-epoch curve is always
    the mean squared error per entry, so it is comparable across sizes.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise TrainingError("training needs a non-empty (N, D) dataset")
    if data.shape[1] != net.arch.flat_dim:
        raise ad.DimensionError(f"dataset width {data.shape[1]} != network input {net.arch.flat_dim}")
    n = len(data)
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    curve: list[float] = []

    for epoch in range(epochs):
        losses = []
        for idx in _batches(rng, n, batch_size):
            x0 = data[idx]
            steps = rng.integers(0, schedule.T, size=len(idx))
            z = rng.standard_normal(x0.shape)
            ab = schedule.alpha_bar[steps][:, None]
            xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z
            cond = labels[idx].copy()
            if uncond_prob > 0:
                cond[rng.random(len(idx)) < uncond_prob] = 0

            nodes = net.param_nodes(trainable=True)
            pred = net.epsilon(ad.constant(xt), schedule.timesteps[steps], cond, nodes)
            loss = eps_loss(pred, z, reduction)
            value = float(loss.value) / (1.0 if reduction == "mean" else z.shape[1])
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} at epoch {epoch}; lower the learning rate")
            ad.backward(loss)
            for k, node in nodes.items():
                v = velocity[k]
                v *= momentum
                v += node.grad
                net.params[k] -= lr * v
            losses.append(value)
        curve.append(float(np.mean(losses)))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.5f", epoch + 1, curve[-1])
    return curve


def noised_pair(schedule: NoiseSchedule, x0: np.ndarray, i: int, rng: np.random.Generator):
    z = rng.standard_normal(np.shape(x0))
    return forward_noise(schedule, x0, i, z), z
