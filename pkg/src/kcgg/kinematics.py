"""Planar n-link revolute arm: forward kinematics, Jacobian, limit clamping.

The default arm is a 3-link stand-in sized for the air-hockey table; its
geometry is a chosen default, not a measured robot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class ArmSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ArmSpec:
    link_lengths: tuple[float, ...] = (0.55, 0.44, 0.44)
    base_position: tuple[float, float] = (-0.55, 0.0)
    joint_limits: tuple[tuple[float, float], ...] = ((-1.6, 1.6), (-2.6, 2.6), (-2.6, 2.6))
    velocity_limits: tuple[float, ...] = (10.0, 10.0, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", tuple(float(v) for v in self.link_lengths))
        object.__setattr__(self, "base_position", tuple(float(v) for v in self.base_position))
        object.__setattr__(
            self, "joint_limits", tuple((float(lo), float(hi)) for lo, hi in self.joint_limits)
        )
        object.__setattr__(self, "velocity_limits", tuple(float(v) for v in self.velocity_limits))
        n = len(self.link_lengths)
        if n == 0:
            raise ArmSpecError("arm needs at least one link")
        if any(not np.isfinite(v) or v <= 0 for v in self.link_lengths):
            raise ArmSpecError(f"link lengths must be > 0, got {self.link_lengths}")
        if len(self.base_position) != 2:
            raise ArmSpecError("base_position must be a 2-vector")
        if len(self.joint_limits) != n or len(self.velocity_limits) != n:
            raise ArmSpecError("joint_limits and velocity_limits need one entry per link")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ArmSpecError(f"joint limit min must be < max, got [{lo}, {hi}]")
        if any(v <= 0 for v in self.velocity_limits):
            raise ArmSpecError("velocity limits must be > 0")

    @property
    def n(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def to_dict(self) -> dict:
        return {
            "link_lengths": list(self.link_lengths),
            "base_position": list(self.base_position),
            "joint_limits": [list(lim) for lim in self.joint_limits],
            "velocity_limits": list(self.velocity_limits),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmSpec":
        allowed = {"link_lengths", "base_position", "joint_limits", "velocity_limits"}
        unknown = set(d) - allowed
        if unknown:
            raise ArmSpecError(f"unknown arm spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if not isinstance(v, tuple) else v for k, v in d.items()})


@dataclass
class ArmState:
    q: np.ndarray
    qdot: np.ndarray = field(default=None)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.qdot = np.zeros_like(self.q) if self.qdot is None else np.asarray(self.qdot, dtype=np.float64)
        if self.q.shape != self.qdot.shape:
            raise ad.DimensionError(f"q {self.q.shape} and qdot {self.qdot.shape} differ in length")


def _check_q(spec: ArmSpec, q: np.ndarray) -> None:
    if q.shape[-1] != spec.n:
        raise ad.DimensionError(f"expected {spec.n} joint angles, got shape {q.shape}")


def fk(spec: ArmSpec, q) -> np.ndarray:
    """End-effector position(s); ``q`` is (n,) or (..., n)."""
    q = np.asarray(q, dtype=np.float64)
    _check_q(spec, q)
    theta = np.cumsum(q, axis=-1)
    L = np.asarray(spec.link_lengths)
    x = np.cos(theta) @ L + spec.base_position[0]
    y = np.sin(theta) @ L + spec.base_position[1]
    return np.stack([x, y], axis=-1)


def forward_kinematics(spec: ArmSpec, q: ad.Node) -> ad.Node:
    """Differentiable FK for a (B, n) node of joint rows; returns a (B, 2) node."""
    if q.value.ndim != 2:
        raise ad.DimensionError(f"forward_kinematics expects (B, n) joint rows, got {q.shape}")
    _check_q(spec, q.value)
    n, B = spec.n, q.shape[0]
    cumulative = np.triu(np.ones((n, n)))  # theta = q @ cumulative
    theta = ad.matmul(q, ad.constant(cumulative))
    L = np.asarray(spec.link_lengths)
    to_x = np.zeros((n, 2))
    to_x[:, 0] = L
    to_y = np.zeros((n, 2))
    to_y[:, 1] = L
    pos = ad.matmul(ad.cos(theta), ad.constant(to_x)) + ad.matmul(ad.sin(theta), ad.constant(to_y))
    base = ad.constant(np.tile(np.asarray(spec.base_position), (B, 1)))
    return pos + base


def fk_jacobian(spec: ArmSpec, q) -> np.ndarray:
    """Analytic 2 x n Jacobian of the end-effector position."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (spec.n,):
        raise ad.DimensionError(f"expected {spec.n} joint angles, got shape {q.shape}")
    theta = np.cumsum(q)
    L = np.asarray(spec.link_lengths)
    # column j sums the contributions of links j..n-1
    sx = np.cumsum((-L * np.sin(theta))[::-1])[::-1]
    sy = np.cumsum((L * np.cos(theta))[::-1])[::-1]
    return np.vstack([sx, sy])


def clamp_to_limits(spec: ArmSpec, state: ArmState) -> ArmState:
    lim = np.asarray(spec.joint_limits)
    vlim = np.asarray(spec.velocity_limits)
    q = np.clip(state.q, lim[:, 0], lim[:, 1])
    qdot = np.clip(state.qdot, -vlim, vlim)
    return ArmState(q, qdot)


def within_limits(spec: ArmSpec, q: np.ndarray, qdot: np.ndarray, tol: float = 1e-9) -> bool:
    lim = np.asarray(spec.joint_limits)
    vlim = np.asarray(spec.velocity_limits)
    return bool(
        np.all(q >= lim[:, 0] - tol) and np.all(q <= lim[:, 1] + tol) and np.all(np.abs(qdot) <= vlim + tol)
    )
