"""Strike cost: squared end-effector-to-object distance at the best window step.

c(tau) = weight * min_{t in [t_s, t_e]} |F(q_t) - b_t|^2

The min is hard; its gradient flows through the argmin timestep only, with
ties going to the smallest t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import Normalizer
from .kinematics import ArmSpec, fk, forward_kinematics


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class StrikeConstraint:
    targets: dict[int, tuple[float, float]]
    window: tuple[int, int]
    weight: float = 1.0

    def __post_init__(self):
        ts, te = self.window
        if not 0 <= ts <= te:
            raise ConstraintError(f"window must satisfy 0 <= t_s <= t_e, got {self.window}")
        missing = [t for t in range(ts, te + 1) if t not in self.targets]
        if missing:
            raise ConstraintError(f"no object position for window steps {missing}")

    @classmethod
    def from_positions(cls, positions: np.ndarray, window: tuple[int, int], weight: float = 1.0):
        ts, te = window
        return cls({t: tuple(map(float, positions[t])) for t in range(ts, te + 1)}, (int(ts), int(te)), weight)

    def target_array(self) -> np.ndarray:
        ts, te = self.window
        return np.array([self.targets[t] for t in range(ts, te + 1)], dtype=np.float64)


def _as_batch(tau: np.ndarray, state_dim: int) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 2 and tau.shape[1] == state_dim:
        return tau[None]
    if tau.ndim == 2:
        return tau.reshape(tau.shape[0], -1, state_dim)
    return tau


def _window_distances(constraint: StrikeConstraint, spec: ArmSpec, states: np.ndarray) -> np.ndarray:
    """Squared distances (B, window length) for a (B, H+1, d) batch."""
    ts, te = constraint.window
    if te >= states.shape[1]:
        raise ConstraintError(f"window end {te} outside horizon of {states.shape[1]} states")
    ee = fk(spec, states[:, ts : te + 1, : spec.n])
    diff = ee - constraint.target_array()[None]
    return np.einsum("btk,btk->bt", diff, diff)


def cost_forward(constraint: StrikeConstraint, spec: ArmSpec, tau) -> np.ndarray | float:
    """Cost of a plain trajectory (H+1, d) or batch (B, H+1, d) / (B, (H+1)*d)."""
    tau = np.asarray(tau)
    d = 2 * spec.n
    single = tau.ndim == 2 and tau.shape[1] == d
    states = _as_batch(tau, d)
    out = constraint.weight * _window_distances(constraint, spec, states).min(axis=1)
    return float(out[0]) if single else out


def argmin_steps(constraint: StrikeConstraint, spec: ArmSpec, states: np.ndarray) -> np.ndarray:
    return constraint.window[0] + np.argmin(_window_distances(constraint, spec, states), axis=1)


def cost(constraint: StrikeConstraint, spec: ArmSpec, tau: ad.Node) -> ad.Node:
    """Differentiable summed cost of a (B, (H+1)*d) node in physical units."""
    d = 2 * spec.n
    if tau.value.ndim != 2 or tau.shape[1] % d:
        raise ad.DimensionError(f"expected (B, (H+1)*{d}) trajectory node, got {tau.shape}")
    B, D = tau.shape
    states = tau.value.reshape(B, -1, d)
    t_star = argmin_steps(constraint, spec, states)

    mask = np.zeros((B, D))
    for b, t in enumerate(t_star):
        mask[b, t * d : t * d + spec.n] = 1.0
    gather = np.zeros((D, spec.n))
    for t in range(D // d):
        gather[t * d : t * d + spec.n] = np.eye(spec.n)
    q = ad.matmul(ad.mul(tau, ad.constant(mask)), ad.constant(gather))
    b = np.array([constraint.targets[int(t)] for t in t_star])
    diff = forward_kinematics(spec, q) - ad.constant(b)
    return ad.sum(ad.mul(diff, diff)) * constraint.weight


class StrikeCost:
    """Strike cost on normalized model-space trajectories.

    Denormalization happens inside so the constraint works in meters.
    """

    def __init__(self, constraint: StrikeConstraint, spec: ArmSpec, normalizer: Normalizer, horizon: int):
        self.constraint = constraint
        self.spec = spec
        self.normalizer = normalizer
        self.horizon = horizon
        self._scale = np.tile(normalizer.half_range, horizon)
        self._offset = np.tile(normalizer.center, horizon)

    def node(self, x: ad.Node) -> ad.Node:
        B = x.shape[0]
        phys = ad.mul(x, ad.constant(np.tile(self._scale, (B, 1)))) + ad.constant(np.tile(self._offset, (B, 1)))
        return cost(self.constraint, self.spec, phys)

    def values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        phys = x * self._scale + self._offset
        return cost_forward(self.constraint, self.spec, phys.reshape(x.shape[0], self.horizon, -1))
