"""Scripted-expert demonstrations for the defend task, in two stroke styles.

The expert predicts the puck, picks the earliest strike-window step it can
reach in time, solves inverse kinematics for that intercept with the elbow
bent one way or the other (the style), and moves there with a minimum-jerk
joint profile. Every demo is replayed in the simulator and kept only if it
blocks.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import ArmSpec, within_limits
from .sim import DefendEnv, PuckState, TableSpec, _rollout_states, execute_plan, sample_puck

log = logging.getLogger(__name__)

DATASET_MAGIC = b"KCGGDAT1"
STYLES = ("sweep_low", "sweep_high")
# elbow (second joint) sign used by each style
ELBOW_SIGN = {"sweep_low": -1.0, "sweep_high": 1.0}
MID_TICK = 16


class DemoRejected(RuntimeError):
    """The expert could not produce a blocking demo for this episode."""


class DemoGenerationError(RuntimeError):
    pass


def min_jerk(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-jerk blend s(u) and ds/du on u in [0, 1]."""
    u = np.clip(u, 0.0, 1.0)
    s = u**3 * (10 - 15 * u + 6 * u**2)
    ds = 30 * u**2 * (1 - u) ** 2
    return s, ds


def inverse_kinematics(
    spec: ArmSpec, target, elbow_sign: float, reference, min_elbow: float = 0.0, n_phi: int = 181
) -> np.ndarray | None:
    """3-link IK for a point target with a fixed elbow sign.

    The last link's absolute angle is scanned; for each value the first two
    links solve a 2-link problem. Among the solutions inside the joint
    limits with |elbow| >= ``min_elbow``, the one closest to ``reference``
    (max-abs joint difference) wins.
    """
    if spec.n != 3:
        raise ValueError("the scripted expert drives a 3-link arm")
    L1, L2, L3 = spec.link_lengths
    lim = np.asarray(spec.joint_limits)
    reference = np.asarray(reference, dtype=np.float64)
    rel = np.asarray(target, dtype=np.float64) - np.asarray(spec.base_position)

    phi = np.linspace(-np.pi, np.pi, n_phi)
    w = rel[None, :] - L3 * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    r2 = np.einsum("ij,ij->i", w, w)
    c1 = (r2 - L1**2 - L2**2) / (2 * L1 * L2)
    ok = np.abs(c1) <= 1.0
    if not np.any(ok):
        return None
    phi, w, c1 = phi[ok], w[ok], c1[ok]
    q1 = elbow_sign * np.arccos(c1)
    q0 = np.arctan2(w[:, 1], w[:, 0]) - np.arctan2(L2 * np.sin(q1), L1 + L2 * np.cos(q1))
    q0 = (q0 + np.pi) % (2 * np.pi) - np.pi
    q2 = (phi - q0 - q1 + np.pi) % (2 * np.pi) - np.pi
    q = np.stack([q0, q1, q2], axis=1)
    inside = np.all((q >= lim[:, 0]) & (q <= lim[:, 1]), axis=1) & (np.abs(q1) >= min_elbow)
    if not np.any(inside):
        return None
    q = q[inside]
    return q[np.argmin(np.abs(q - reference).max(axis=1))]


def _profile(q_from: np.ndarray, q_to: np.ndarray, ticks: np.ndarray, start: int, duration: int, dt: float):
    u = (ticks - start) / duration
    s, ds = min_jerk(u)
    inside = (u > 0) & (u < 1)
    q = q_from + s[:, None] * (q_to - q_from)
    qdot = np.where(inside[:, None], ds[:, None] * (q_to - q_from) / (duration * dt), 0.0)
    return q, qdot


@dataclass
class ExpertParams:
    lead_ticks: tuple[int, int] = (1, 3)  # arrive this many ticks before the puck
    hold_ticks: int = 2
    retreat_fraction: tuple[float, float] = (0.85, 1.0)
    speed_margin: float = 0.9  # fraction of the velocity limit the profile may use
    min_elbow: float = 0.5  # |elbow| at the intercept keeps the two styles apart


def scripted_expert(
    env: DefendEnv, puck: PuckState, style: str, seed: int, params: ExpertParams | None = None
) -> np.ndarray:
    """One (H+1, 2n) demo trajectory [q, qdot] for ``style``; raises DemoRejected."""
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; choose from {STYLES}")
    params = params or ExpertParams()
    rng = np.random.default_rng(seed)
    lead = int(rng.integers(params.lead_ticks[0], params.lead_ticks[1] + 1))
    retreat = float(rng.uniform(*params.retreat_fraction))

    arm, H1, dt = env.arm, env.horizon, env.dt
    home = np.asarray(env.home, dtype=np.float64)
    vlim = np.asarray(arm.velocity_limits)
    states = _rollout_states(env.table, puck, H1 - 1, dt)
    positions = np.array([s.position for s in states])
    window = env.strike_window(positions, states)
    if window is None:
        raise DemoRejected("puck never enters the strike window")

    ticks = np.arange(H1)
    for k in range(window[0], window[1] + 1):
        q_hit = inverse_kinematics(arm, positions[k], ELBOW_SIGN[style], home, params.min_elbow)
        if q_hit is None:
            continue
        arrive = k - lead
        # min-jerk peak speed is 1.875 * distance / duration
        needed = 1.875 * np.abs(q_hit - home) / (params.speed_margin * vlim * dt)
        if arrive < 1 or arrive < np.ceil(needed.max()):
            continue
        q, qdot = _profile(home, q_hit, ticks, 0, arrive, dt)
        leave = k + params.hold_ticks
        if leave < H1 - 1:
            # shrink the retreat if the remaining ticks are too few for it
            room = params.speed_margin * vlim * dt * (H1 - 1 - leave) / 1.875
            frac = min(retreat, float(np.min(room / np.maximum(np.abs(home - q_hit), 1e-12))))
            q_back = q_hit + frac * (home - q_hit)
            q2, qdot2 = _profile(q_hit, q_back, ticks, leave, H1 - 1 - leave, dt)
            late = ticks > leave
            q[late], qdot[late] = q2[late], qdot2[late]
        plan = np.concatenate([q, qdot], axis=1)
        if not within_limits(arm, q, qdot):
            continue
        if execute_plan(env, plan, puck).blocked:
            return plan
    raise DemoRejected("no reachable intercept blocks the puck")


def elbow_feature(trajectories: np.ndarray, tick: int = MID_TICK) -> np.ndarray:
    """Mid-horizon elbow angle of each (H+1, d) trajectory in a batch."""
    return np.asarray(trajectories)[..., tick, 1]


def classify_style(trajectories: np.ndarray, tick: int = MID_TICK) -> np.ndarray:
    """Style index per trajectory by the elbow-sign rule (0 = sweep_low)."""
    return (elbow_feature(trajectories, tick) > 0).astype(int)


@dataclass
class DemoSet:
    trajectories: np.ndarray  # (N, H+1, d)
    labels: np.ndarray  # style index per demo
    pucks: np.ndarray  # (N, 4) initial puck position and velocity
    arm: ArmSpec = field(default_factory=ArmSpec)
    table: TableSpec = field(default_factory=TableSpec)
    dt: float = 0.02
    styles: tuple[str, ...] = STYLES
    attempts: int = 0

    @property
    def horizon(self) -> int:
        return self.trajectories.shape[1]

    def counts(self) -> dict[str, int]:
        return {s: int(np.sum(self.labels == k)) for k, s in enumerate(self.styles)}

    def __len__(self) -> int:
        return len(self.trajectories)


def generate_dataset(env: DefendEnv, n_per_style: int, seed: int, max_reject: float = 0.5) -> DemoSet:
    """``n_per_style`` blocking demos of each style, alternating styles.

    Each demo gets a fresh episode; a rejected episode is replaced by the
    next one. Aborts once rejections exceed ``max_reject`` of attempts
    (checked after a short burn-in so a single early miss does not trip it).
    """
    if n_per_style < 1:
        raise ValueError("n_per_style must be >= 1")
    rng = np.random.default_rng(seed)
    trajs, labels, pucks = [], [], []
    attempts = rejected = 0
    for j in range(n_per_style * len(STYLES)):
        style = j % len(STYLES)
        while True:
            attempts += 1
            puck = sample_puck(env, rng)
            demo_seed = int(rng.integers(2**32))
            try:
                trajs.append(scripted_expert(env, puck, STYLES[style], demo_seed))
                break
            except DemoRejected:
                rejected += 1
                if attempts >= 20 and rejected > max_reject * attempts:
                    raise DemoGenerationError(
                        f"{rejected} of {attempts} episodes rejected; the episode distribution "
                        "does not fit the arm's reach or speed"
                    )
        labels.append(style)
        pucks.append(puck.as_array())
    log.info("generated %d demos from %d episodes (%d rejected)", len(trajs), attempts, rejected)
    return DemoSet(
        np.array(trajs), np.array(labels, dtype=int), np.array(pucks), env.arm, env.table, env.dt, STYLES, attempts
    )


def save_dataset(path, demos: DemoSet) -> None:
    header = {
        "arm": demos.arm.to_dict(),
        "table": demos.table.to_dict(),
        "horizon": demos.horizon,
        "state_dim": demos.trajectories.shape[2],
        "dt": demos.dt,
        "styles": list(demos.styles),
        "counts": demos.counts(),
        "n_demos": len(demos),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for traj, label, puck in zip(demos.trajectories, demos.labels, demos.pucks):
            fh.write(struct.pack("<H", int(label)))
            fh.write(np.ascontiguousarray(traj, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(puck, dtype="<f8").tobytes())


def load_dataset(path) -> DemoSet:
    data = Path(path).read_bytes()
    if data[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a demonstration dataset (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    H1, d, n = header["horizon"], header["state_dim"], header["n_demos"]
    record = 2 + 8 * (H1 * d + 4)
    offset = 16 + hlen
    if len(data) - offset != n * record:
        raise ValueError(f"{path}: expected {n} records of {record} bytes")
    trajs, labels, pucks = [], [], []
    for _ in range(n):
        (label,) = struct.unpack("<H", data[offset : offset + 2])
        offset += 2
        trajs.append(np.frombuffer(data, "<f8", H1 * d, offset).reshape(H1, d))
        offset += 8 * H1 * d
        pucks.append(np.frombuffer(data, "<f8", 4, offset))
        offset += 32
        labels.append(label)
    return DemoSet(
        np.array(trajs, dtype=np.float64),
        np.array(labels, dtype=int),
        np.array(pucks, dtype=np.float64),
        ArmSpec.from_dict(header["arm"]),
        TableSpec.from_dict(header["table"]),
        float(header["dt"]),
        tuple(header["styles"]),
    )
