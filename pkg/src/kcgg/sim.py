"""2-D air-hockey "defend" environment.

Frame: x runs along the table from the defended goal (x = 0) to the far end
(x = length); y is lateral with the centerline at 0. The arm base sits just
behind the goal. Pucks are launched toward decreasing x and the arm executes
one plan made from the initial puck observation.

The geometry and the strike-window rule are stand-in choices for a desk-scale
defend task, not a copy of any particular simulator.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .constraints import StrikeConstraint
from .kinematics import ArmSpec, ArmState, clamp_to_limits, fk


class TableSpecError(ValueError):
    pass


@dataclass(frozen=True)
class TableSpec:
    length: float = 2.0
    width: float = 1.0
    goal_width: float = 0.25
    puck_radius: float = 0.03
    mallet_radius: float = 0.05
    damping: float = 0.95  # fraction of speed kept per second
    defend_line_x: float = 0.6

    def __post_init__(self):
        if not 0 < self.goal_width < self.width:
            raise TableSpecError("goal_width must be positive and below the table width")
        if self.puck_radius <= 0 or self.mallet_radius <= 0:
            raise TableSpecError("radii must be > 0")
        if not 0 <= self.damping <= 1:
            raise TableSpecError("damping must lie in [0, 1]")
        if not 0 < self.defend_line_x < self.length:
            raise TableSpecError("defend line must lie on the table")

    @property
    def contact_distance(self) -> float:
        return self.puck_radius + self.mallet_radius

    @property
    def y_bound(self) -> float:
        return 0.5 * self.width - self.puck_radius

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TableSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TableSpecError(f"unknown table spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PuckState:
    position: np.ndarray
    velocity: np.ndarray
    in_goal: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    def copy(self) -> "PuckState":
        return PuckState(self.position.copy(), self.velocity.copy(), self.in_goal)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


def puck_step(table: TableSpec, state: PuckState, dt: float) -> PuckState:
    """Damped constant-velocity step with specular wall reflections.

    A puck reaching x = 0 inside the goal mouth drops into the goal and stops.
    """
    if state.in_goal:
        return state.copy()
    v = state.velocity * table.damping**dt
    p = state.position + v * dt
    yb = table.y_bound
    # side walls; loop covers (unrealistic) multi-bounce steps
    while abs(p[1]) > yb:
        wall = np.sign(p[1]) * yb
        p[1] = 2 * wall - p[1]
        v[1] = -v[1]
    r = table.puck_radius
    if p[0] < r:
        if abs(p[1]) <= 0.5 * table.goal_width:
            return PuckState(np.array([0.0, p[1]]), np.zeros(2), True)
        p[0] = 2 * r - p[0]
        v[0] = -v[0]
    elif p[0] > table.length - r:
        p[0] = 2 * (table.length - r) - p[0]
        v[0] = -v[0]
    return PuckState(p, v)


def predict_puck(table: TableSpec, state: PuckState, steps: int, dt: float) -> np.ndarray:
    """Positions b_0..b_steps (steps + 1 rows) of a deterministic rollout."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    out = [state.position.copy()]
    s = state
    for _ in range(steps):
        s = puck_step(table, s, dt)
        out.append(s.position.copy())
    return np.array(out)


def _rollout_states(table: TableSpec, state: PuckState, steps: int, dt: float) -> list[PuckState]:
    out = [state.copy()]
    for _ in range(steps):
        out.append(puck_step(table, out[-1], dt))
    return out


@dataclass
class DefendEnv:
    table: TableSpec = field(default_factory=TableSpec)
    arm: ArmSpec = field(default_factory=ArmSpec)
    home: tuple[float, ...] = (-1.25, 0.0, 2.2)
    horizon: int = 32  # plan states, H + 1
    dt: float = 0.02
    reach_margin: float = 0.02
    min_reach: float = 0.35
    extra_ticks: int = 15

    @property
    def state_dim(self) -> int:
        return 2 * self.arm.n

    def home_state(self) -> ArmState:
        return ArmState(np.array(self.home, dtype=np.float64), np.zeros(self.arm.n))

    def reachable(self, p: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(p) - np.asarray(self.arm.base_position), axis=1)
        return (r >= self.min_reach) & (r <= self.arm.reach - self.reach_margin)

    def strike_window(self, positions: np.ndarray, states: list[PuckState] | None = None) -> tuple[int, int] | None:
        """First contiguous run of steps where the puck is reachable and behind the defend line."""
        inside = self.reachable(positions) & (positions[:, 0] <= self.table.defend_line_x)
        if states is not None:
            inside &= np.array([not s.in_goal for s in states])
        idx = np.flatnonzero(inside)
        if idx.size == 0:
            return None
        ts = int(idx[0])
        te = ts
        while te + 1 < len(inside) and inside[te + 1]:
            te += 1
        return ts, te

    def constraint_for(self, puck: PuckState, weight: float = 1.0) -> StrikeConstraint | None:
        states = _rollout_states(self.table, puck, self.horizon - 1, self.dt)
        positions = np.array([s.position for s in states])
        window = self.strike_window(positions, states)
        if window is None:
            return None
        return StrikeConstraint.from_positions(positions, window, weight)


def tracking_controller(env: DefendEnv, plan: np.ndarray, state: ArmState, tick: int) -> tuple[ArmState, float]:
    """Advance one tick toward plan state ``tick``; returns (new state, divergence).

    Position moves are limited to velocity_limit * dt per joint and joint
    limits are enforced, so jumps in a plan are not executed exactly.
    Past the end of the plan the arm holds its final position.
    """
    n = env.arm.n
    if tick >= len(plan):
        return ArmState(state.q.copy(), np.zeros(n)), 0.0
    target = clamp_to_limits(env.arm, ArmState(plan[tick, :n], plan[tick, n:]))
    vlim = np.asarray(env.arm.velocity_limits)
    needed = (target.q - state.q) / env.dt
    if np.all(np.abs(needed) <= vlim):
        new = target
    else:
        v = np.clip(needed, -vlim, vlim)
        new = clamp_to_limits(env.arm, ArmState(state.q + v * env.dt, v))
    return new, float(np.linalg.norm(new.q - plan[tick, :n]))


@dataclass
class EpisodeResult:
    blocked: bool
    contact_time: float | None
    min_distance: float
    plan_latency_ms: float
    feasible: bool = True
    failed: bool = False
    trace: list[dict] = field(default_factory=list)
    plan: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "blocked": self.blocked,
            "contact_time": self.contact_time,
            "min_distance": self.min_distance,
            "plan_latency_ms": self.plan_latency_ms,
            "feasible": self.feasible,
            "failed": self.failed,
        }


Planner = Callable[[PuckState, "StrikeConstraint | None", int], tuple[np.ndarray, dict]]


def execute_plan(env: DefendEnv, plan: np.ndarray, puck: PuckState, record: bool = False) -> EpisodeResult:
    """Run a plan against the puck; contact is checked at every control tick."""
    arm = env.home_state()
    p = puck.copy()
    contact = env.table.contact_distance
    min_d = np.inf
    trace: list[dict] = []
    blocked, t_contact = False, None
    ticks = env.horizon + env.extra_ticks
    for k in range(ticks):
        if k > 0:
            arm, div = tracking_controller(env, plan, arm, k)
            p = puck_step(env.table, p, env.dt)
        else:
            div = 0.0
        ee = fk(env.arm, arm.q)
        d = float(np.linalg.norm(ee - p.position)) if not p.in_goal else np.inf
        min_d = min(min_d, d)
        if record:
            trace.append(
                {
                    "tick": k,
                    "puck": p.as_array().tolist(),
                    "q": arm.q.tolist(),
                    "qdot": arm.qdot.tolist(),
                    "ee": ee.tolist(),
                    "divergence": div,
                }
            )
        if d <= contact:
            blocked, t_contact = True, k * env.dt
            break
        if p.in_goal:
            break
    return EpisodeResult(blocked, t_contact, float(min_d), 0.0, trace=trace, plan=plan)


def run_episode(env: DefendEnv, planner: Planner, puck: PuckState, seed: int, record: bool = False) -> EpisodeResult:
    """Plan once from the initial puck observation, then execute."""
    import time

    constraint = env.constraint_for(puck)
    t0 = time.perf_counter()
    try:
        plan, diag = planner(puck, constraint, seed)
    except Exception as exc:  # sampler failures mark the episode, not the run
        return EpisodeResult(False, None, float("inf"), 0.0, feasible=constraint is not None, failed=True,
                             diagnostics={"error": repr(exc)})
    latency = 1e3 * (time.perf_counter() - t0)
    result = execute_plan(env, np.asarray(plan), puck, record)
    result.plan_latency_ms = latency
    result.feasible = constraint is not None
    result.diagnostics = diag
    return result


def sample_puck(env: DefendEnv, rng: np.random.Generator) -> PuckState:
    """Launch toward the goal side: speed 1-2.5 m/s within +-40 deg of -x.

    The start is placed so the puck reaches the defend line 0.2-0.6 s later
    (ignoring damping).
    """
    table = env.table
    speed = rng.uniform(1.0, 2.5)
    angle = np.deg2rad(rng.uniform(-40.0, 40.0))
    arrive = rng.uniform(0.2, 0.6)
    y0 = rng.uniform(-0.4, 0.4)
    v = speed * np.array([-np.cos(angle), np.sin(angle)])
    x0 = min(table.defend_line_x + abs(v[0]) * arrive, table.length - table.puck_radius - 1e-6)
    return PuckState(np.array([x0, y0]), v)


def episode_set(env: DefendEnv, n: int, seed: int) -> list[PuckState]:
    rng = np.random.default_rng(seed)
    return [sample_puck(env, rng) for _ in range(n)]


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_eval(
    env: DefendEnv,
    planner: Planner,
    n_episodes: int,
    seed: int,
    pucks: list[PuckState] | None = None,
    parallel: int = 1,
) -> tuple[float, list[EpisodeResult]]:
    """Block rate over a seeded episode set shared by every planner.

    Block rate is blocked / feasible episodes.
    """
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    pucks = pucks if pucks is not None else episode_set(env, n_episodes, seed)
    jobs = [(k, pucks[k], episode_seed(seed, k)) for k in range(n_episodes)]
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as pool:
            results = list(pool.map(_run_job, [(env, planner, *j) for j in jobs]))
    else:
        results = [(k, run_episode(env, planner, p, s)) for k, p, s in jobs]
    results.sort(key=lambda kr: kr[0])
    episodes = [r for _, r in results]
    return block_rate(episodes), episodes


def _run_job(args):
    env, planner, k, puck, s = args
    return k, run_episode(env, planner, puck, s)


def block_rate(episodes: list[EpisodeResult]) -> float:
    feasible = [e for e in episodes if e.feasible]
    if not feasible:
        return 0.0
    return sum(e.blocked for e in feasible) / len(feasible)


def write_trace(path, result: EpisodeResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in result.trace:
            fh.write(json.dumps(row) + "\n")
