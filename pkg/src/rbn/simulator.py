"""Multi-agent goal-seeking trials with safety filtering.

Per control period the loop (1) counts new contacts and, while any pair is
closer than ``collision_dist``, stops every agent and turns it away from its
nearest neighbour; (2) otherwise picks the goal-seeking command or a
deadlock-resolution turn; (3) passes that command through the configured
safety filter; (4) integrates the unicycles with RK4.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dynamics import Air3D, wrap_angle
from .filter import barrier_constraint, least_restrictive, project_box_halfspace, qp_filter
from .providers import ShiftedProvider, ValueProvider

__all__ = [
    "SimConfig",
    "SimMetrics",
    "Controller",
    "Trace",
    "nominal_control",
    "detect_deadlock",
    "resolve_deadlock",
    "resolve_collision",
    "relative_state",
    "pairwise_distances",
    "run_trial",
    "run_trials",
]


@dataclass
class SimConfig:
    n_agents: int = 3
    dt: float = 0.01
    trial_seconds: float = 60.0
    v: float = 0.6
    u_max: float = 1.1
    goal_radius: float = 0.3
    collision_dist: float = 0.4
    deadlock_T: int = 100
    deadlock_threshold: float = 0.1
    deadlock_gain: float = 3.0
    deadlock_hold: int = 100
    deadlock_proximity: float = 0.8
    domain: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, 1.0), (-1.0, 1.0))
    init_separation: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.domain = tuple(tuple(float(v) for v in d) for d in self.domain)
        for name in ("dt", "trial_seconds", "v", "u_max", "goal_radius", "collision_dist",
                     "deadlock_threshold", "deadlock_gain", "deadlock_proximity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_agents < 1 or self.deadlock_T < 1 or self.deadlock_hold < 1:
            raise ValueError("counts must be positive")

    @property
    def steps(self) -> int:
        return int(round(self.trial_seconds / self.dt))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = [list(v) for v in self.domain]
        return d


@dataclass
class SimMetrics:
    collisions_per_min: float
    in_dist_collisions_per_min: float
    goals_per_min: float
    deadlock_events: int
    mean_min_pairwise_distance: float
    collisions: int = 0
    in_dist_collisions: int = 0
    goals: int = 0
    minutes: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Controller:
    """Which safety layer sits between the commanded and applied turn rates.

    ``kind`` is ``"nominal"`` (no filter), ``"least_restrictive"``, ``"qp"``
    (joint value over all agents), or ``"pairwise_qp"`` (two-vehicle
    relative value; each agent filters itself against its nearest
    neighbour, assuming that neighbour turns cooperatively).
    """

    kind: str = "nominal"
    provider: ValueProvider | None = None
    gamma: float = 0.0
    delta: float = 0.0
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in ("nominal", "least_restrictive", "qp", "pairwise_qp"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.kind != "nominal" and self.provider is None:
            raise ValueError(f"{self.kind} controller needs a value provider")

    @property
    def value(self) -> ValueProvider | None:
        if self.provider is None or self.delta == 0:
            return self.provider
        return ShiftedProvider(self.provider, self.delta)

    def describe(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "delta": self.delta,
                "threshold": self.threshold}


@dataclass
class Trace:
    t: np.ndarray
    states: np.ndarray  # (steps + 1, n, 3)
    controls: np.ndarray  # (steps, n)
    goals: np.ndarray  # (steps + 1, n, 2)
    collision_mode: np.ndarray  # (steps + 1,)
    new_collisions: np.ndarray  # (steps + 1,)
    goal_events: np.ndarray  # (steps + 1,)
    deadlock_active: np.ndarray  # (steps + 1, n)

    def header(self) -> list[str]:
        n = self.states.shape[1]
        cols = ["t"]
        for i in range(n):
            cols += [f"x{i}", f"y{i}", f"theta{i}", f"u{i}", f"gx{i}", f"gy{i}"]
        return cols + ["collision_mode", "new_collisions", "goal_events", "deadlock_agents"]

    def rows(self):
        n = self.states.shape[1]
        for k in range(len(self.t)):
            row = [float(self.t[k])]
            for i in range(n):
                u = float(self.controls[k, i]) if k < len(self.controls) else 0.0
                row += [*map(float, self.states[k, i]), u, *map(float, self.goals[k, i])]
            row += [int(self.collision_mode[k]), int(self.new_collisions[k]),
                    int(self.goal_events[k]), int(self.deadlock_active[k].sum())]
            yield row


# -- building blocks ----------------------------------------------------
def nominal_control(agent_state, goal, u_max: float = 1.1) -> float:
    """Heading-error proportional turn toward ``goal``."""
    x, y, th = (float(v) for v in agent_state)
    gx, gy = (float(v) for v in goal)
    if gx == x and gy == y:
        return 0.0
    target = math.atan2(gy - y, gx - x)
    err = math.atan2(math.sin(target - th), math.cos(target - th))
    return float(np.clip(err, -u_max, u_max))


def _turn_away(me, other, gain: float, u_max: float) -> float:
    x, y, th = me
    cross = math.cos(th) * (other[1] - y) - math.sin(th) * (other[0] - x)
    return float(np.clip(-gain * np.sign(cross), -u_max, u_max))


def resolve_deadlock(state_n, state_m, config: SimConfig) -> tuple[float, float]:
    """Turn both agents away from each other; ``sgn(0) = 0``."""
    return (
        _turn_away(state_n, state_m, config.deadlock_gain, config.u_max),
        _turn_away(state_m, state_n, config.deadlock_gain, config.u_max),
    )


def detect_deadlock(headings_n, headings_m, distances, config: SimConfig) -> bool:
    """Similar headings and proximity held over the last ``deadlock_T`` steps."""
    hn = np.asarray(headings_n, dtype=np.float64)
    hm = np.asarray(headings_m, dtype=np.float64)
    T = config.deadlock_T
    if len(hn) < T or len(hm) < T:
        return False
    dist = np.broadcast_to(np.asarray(distances, dtype=np.float64), hn.shape)
    similar = np.abs(wrap_angle(hn[-T:] - hm[-T:])) < config.deadlock_threshold
    close = dist[-T:] < config.deadlock_proximity
    return bool(np.all(similar & close))


def pairwise_distances(states: np.ndarray) -> np.ndarray:
    p = np.asarray(states)[:, :2]
    return np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))


def resolve_collision(states, config: SimConfig):
    """``(speeds, turns, active)`` while any pair is closer than ``collision_dist``.

    Everyone stops and turns away from their nearest agent. An agent in a
    contact pair drives off at ``v`` once it no longer faces that agent;
    stopping outright would pin the pair in contact forever.
    """
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    D = pairwise_distances(states)
    np.fill_diagonal(D, np.inf)
    active = bool(np.any(D < config.collision_dist))
    if not active:
        return np.full(n, config.v), np.full(n, np.nan), False
    turns = np.empty(n)
    speeds = np.zeros(n)
    for i in range(n):
        j = int(np.argmin(D[i]))
        me, other = states[i], states[j]
        turns[i] = _turn_away(me, other, config.deadlock_gain, config.u_max)
        facing = math.cos(me[2]) * (other[0] - me[0]) + math.sin(me[2]) * (other[1] - me[1])
        if D[i, j] < config.collision_dist and facing <= 0:
            speeds[i] = config.v
    return speeds, turns, True


def relative_state(ego, other) -> np.ndarray:
    """Position and heading of ``other`` in the ego frame (two-vehicle coordinates)."""
    x, y, th = ego
    dx, dy = other[0] - x, other[1] - y
    c, s = math.cos(th), math.sin(th)
    return np.array([c * dx + s * dy, -s * dx + c * dy, float(wrap_angle(other[2] - th))])


def _unicycle_rk4(states: np.ndarray, speeds: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    def f(s):
        return np.stack([speeds * np.cos(s[:, 2]), speeds * np.sin(s[:, 2]), u], axis=1)

    k1 = f(states)
    k2 = f(states + 0.5 * dt * k1)
    k3 = f(states + 0.5 * dt * k2)
    k4 = f(states + dt * k3)
    out = states + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    out[:, 2] = wrap_angle(out[:, 2])
    return out


def _sample_positions(rng, n, lo, hi, min_sep, avoid=(), attempts=10_000):
    out = []
    for _ in range(attempts):
        p = lo + (hi - lo) * rng.random(2)
        if all(np.hypot(*(p - q)) >= min_sep for q in list(out) + list(avoid)):
            out.append(p)
            if len(out) == n:
                return np.array(out)
    raise RuntimeError("could not place agents with the requested separation")


def _in_domain(states: np.ndarray, config: SimConfig) -> bool:
    (x0, x1), (y0, y1) = config.domain
    p = states[:, :2]
    return bool(np.all((p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)))


# -- filters --------------------------------------------------------------
def _filter_joint(controller: Controller, states: np.ndarray, u_des: np.ndarray) -> np.ndarray:
    provider = controller.value
    system = provider.system
    x = states.reshape(-1)
    if controller.kind == "qp":
        res = qp_filter(provider, system, x, controller.gamma, u_des)
    else:
        res = least_restrictive(provider, system, x, controller.gamma, u_des, controller.threshold)
    return np.asarray(res.control, dtype=np.float64)


def _filter_pairwise(controller: Controller, states: np.ndarray, u_des: np.ndarray) -> np.ndarray:
    provider = controller.value
    system = provider.system
    if not isinstance(system, Air3D):
        raise ValueError("pairwise_qp needs a two-vehicle (air3d) value provider")
    n = len(states)
    if n < 2:
        return u_des
    D = pairwise_distances(states)
    np.fill_diagonal(D, np.inf)
    nearest = D.argmin(axis=1)
    rel = np.stack([relative_state(states[i], states[nearest[i]]) for i in range(n)])
    V, grad = provider.value_and_gradient(rel, controller.gamma)
    a, b = barrier_constraint(system, rel, V, grad, controller.gamma)
    lo, hi = system.bounds.lo, system.bounds.hi
    # the neighbour is assumed to turn so as to help
    coop = np.maximum(a[:, 1] * hi[1], a[:, 1] * lo[1])
    u, _ = project_box_halfspace(a[:, :1], b - coop, u_des[:, None], lo[:1], hi[:1])
    return u[:, 0]


# -- trial loop -----------------------------------------------------------
def run_trial(config: SimConfig, controller: Controller | None = None) -> tuple[SimMetrics, Trace]:
    controller = Controller() if controller is None else controller
    n = config.n_agents
    if controller.kind in ("qp", "least_restrictive"):
        dim = controller.provider.system.state_dim
        if dim != 3 * n:
            raise ValueError(f"joint value has state dimension {dim}; {n} agents need {3 * n}")
    elif controller.kind == "pairwise_qp" and not isinstance(controller.provider.system, Air3D):
        raise ValueError("pairwise_qp needs a two-vehicle (air3d) value provider")
    rng = np.random.default_rng(config.seed)
    (x0, x1), (y0, y1) = config.domain
    lo, hi = np.array([x0, y0]), np.array([x1, y1])
    pos = _sample_positions(rng, n, lo, hi, config.init_separation)
    heading = -math.pi + 2 * math.pi * rng.random(n)
    states = np.column_stack([pos, heading])
    goals = np.stack([
        _sample_positions(rng, 1, lo, hi, config.goal_radius, avoid=pos)[0] for _ in range(n)
    ])

    steps = config.steps
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    counters = {p: 0 for p in pairs}
    hold = np.zeros(n, dtype=int)
    partner = np.full(n, -1)
    prev_below = {p: False for p in pairs}

    tr_states = np.empty((steps + 1, n, 3))
    tr_goals = np.empty((steps + 1, n, 2))
    tr_u = np.zeros((steps, n))
    tr_mode = np.zeros(steps + 1, dtype=bool)
    tr_new = np.zeros(steps + 1, dtype=int)
    tr_goal_ev = np.zeros(steps + 1, dtype=int)
    tr_dead = np.zeros((steps + 1, n), dtype=bool)
    min_dist = np.empty(steps + 1)

    collisions = in_dist = goals_hit = deadlocks = 0
    for k in range(steps + 1):
        D = pairwise_distances(states)
        new = 0
        for (i, j) in pairs:
            below = D[i, j] < config.collision_dist
            if below and not prev_below[(i, j)]:
                new += 1
                collisions += 1
                in_dist += _in_domain(states, config)
            prev_below[(i, j)] = below
        tr_states[k] = states
        tr_goals[k] = goals
        tr_new[k] = new
        min_dist[k] = min((D[i, j] for i, j in pairs), default=math.inf)

        # goal capture
        reached = 0
        for i in range(n):
            if np.hypot(*(states[i, :2] - goals[i])) < config.goal_radius:
                reached += 1
                goals[i] = _sample_positions(rng, 1, lo, hi, config.goal_radius, avoid=states[:, :2])[0]
        goals_hit += reached
        tr_goal_ev[k] = reached
        if k == steps:
            tr_mode[k] = any(prev_below.values())
            tr_dead[k] = hold > 0
            break

        # deadlock bookkeeping
        for (i, j) in pairs:
            similar = abs(float(wrap_angle(states[i, 2] - states[j, 2]))) < config.deadlock_threshold
            close = D[i, j] < config.deadlock_proximity
            counters[(i, j)] = counters[(i, j)] + 1 if (similar and close) else 0
            if counters[(i, j)] >= config.deadlock_T and hold[i] == 0 and hold[j] == 0:
                deadlocks += 1
                hold[i] = hold[j] = config.deadlock_hold
                partner[i], partner[j] = j, i
                counters[(i, j)] = 0

        speeds, turns, colliding = resolve_collision(states, config)
        tr_mode[k] = colliding
        tr_dead[k] = hold > 0
        if colliding:
            u = turns
        else:
            u_des = np.array([nominal_control(states[i], goals[i], config.u_max) for i in range(n)])
            for i in range(n):
                if hold[i] > 0:
                    j = partner[i]
                    u_des[i] = resolve_deadlock(states[i], states[j], config)[0]
            if controller.kind == "nominal":
                u = u_des
            elif controller.kind == "pairwise_qp":
                u = _filter_pairwise(controller, states, u_des)
            else:
                u = _filter_joint(controller, states, u_des)
        hold = np.maximum(hold - 1, 0)
        u = np.clip(u, -config.u_max, config.u_max)
        tr_u[k] = u
        states = _unicycle_rk4(states, speeds, u, config.dt)

    minutes = config.trial_seconds / 60.0
    metrics = SimMetrics(
        collisions_per_min=collisions / minutes,
        in_dist_collisions_per_min=in_dist / minutes,
        goals_per_min=goals_hit / minutes,
        deadlock_events=deadlocks,
        mean_min_pairwise_distance=float(np.mean(min_dist)) if pairs else math.inf,
        collisions=collisions,
        in_dist_collisions=in_dist,
        goals=goals_hit,
        minutes=minutes,
    )
    trace = Trace(
        t=np.arange(steps + 1) * config.dt, states=tr_states, controls=tr_u, goals=tr_goals,
        collision_mode=tr_mode, new_collisions=tr_new, goal_events=tr_goal_ev,
        deadlock_active=tr_dead,
    )
    return metrics, trace


def run_trials(
    config: SimConfig, controller: Controller | None, seeds: Sequence[int]
) -> list[SimMetrics]:
    out = []
    for s in seeds:
        cfg = SimConfig(**{**config.__dict__, "seed": int(s)})
        out.append(run_trial(cfg, controller)[0])
    return out
