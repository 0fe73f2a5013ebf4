"""Control-affine systems with box-bounded inputs.

Every system is written as ``f(x, u) = drift(x) + G(x) u`` and exposes the
pieces the rest of the toolkit needs: the boundary (failure-distance)
function ``l``, the closed-form Hamiltonian ``max_u p . f(x, u)`` and its
maximiser, and Lax-Friedrichs dissipation bounds.

State arrays carry the state on the last axis, so every method works on a
single state ``(n,)`` or a batch ``(..., n)``. The ``drift``, ``boundary``,
``hamiltonian`` and friends accept either numpy arrays or torch tensors;
the training loop relies on the torch path being differentiable.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields
from typing import Callable, ClassVar, Sequence

import numpy as np
import torch

__all__ = [
    "ControlBounds",
    "SystemModel",
    "Integrator1D",
    "Dubins3D",
    "Air3D",
    "MultiVehicle9D",
    "Trajectory",
    "make_system",
    "wrap_angle",
    "rk4_step",
    "integrate",
    "rollout_batch",
    "SYSTEMS",
]


def _xp(x):
    return torch if isinstance(x, torch.Tensor) else np


def _stack(parts, like):
    if isinstance(like, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def _as_array(x):
    if isinstance(x, torch.Tensor):
        return x
    return np.asarray(x, dtype=np.float64)


def wrap_angle(theta):
    """Wrap angles to [-pi, pi)."""
    xp = _xp(theta)
    return xp.remainder(theta + math.pi, 2 * math.pi) - math.pi


@dataclass(frozen=True)
class ControlBounds:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi):
            raise ValueError("lower and upper bounds differ in length")
        for a, b in zip(lo, hi):
            if not (math.isfinite(a) and math.isfinite(b)) or a > b:
                raise ValueError(f"invalid control interval [{a}, {b}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, u_max: float, dim: int = 1) -> "ControlBounds":
        return cls((-u_max,) * dim, (u_max,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=np.float64)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    def clip(self, u):
        if isinstance(u, torch.Tensor):
            lo = torch.as_tensor(self.lo, dtype=u.dtype)
            hi = torch.as_tensor(self.hi, dtype=u.dtype)
            return torch.minimum(torch.maximum(u, lo), hi)
        return np.clip(u, self.lo, self.hi)


class SystemModel:
    """Base class for control-affine systems.

    Subclasses define ``drift``, ``control_effect`` (``G(x) u``),
    ``control_gain`` (``p^T G(x)``), ``boundary``, ``boundary_gradient`` and
    ``dissipation``. The Hamiltonian and optimal control follow generically
    from the box bounds.
    """

    name: ClassVar[str] = ""
    state_dim: ClassVar[int] = 0
    control_dim: ClassVar[int] = 0
    periodic_dims: ClassVar[tuple[int, ...]] = ()

    # training / evaluation domain, one (lo, hi) per state dimension
    domain: tuple[tuple[float, float], ...]

    @property
    def bounds(self) -> ControlBounds:
        raise NotImplementedError

    # -- pieces supplied by each system ---------------------------------
    def drift(self, x):
        raise NotImplementedError

    def control_effect(self, x, u):
        raise NotImplementedError

    def control_gain(self, x, p):
        raise NotImplementedError

    def boundary(self, x):
        raise NotImplementedError

    def boundary_gradient(self, x):
        raise NotImplementedError

    def dissipation(self, mins: Sequence[float], maxs: Sequence[float]) -> np.ndarray:
        """Upper bound of |dH/dp_i| over the box ``[mins, maxs]`` and all controls."""
        raise NotImplementedError

    # -- generic machinery ----------------------------------------------
    def _check_state(self, x):
        if x.shape[-1] != self.state_dim:
            raise ValueError(
                f"{self.name}: state has dimension {x.shape[-1]}, expected {self.state_dim}"
            )

    def flow(self, x, u):
        x = _as_array(x)
        u = _as_array(u)
        self._check_state(x)
        if u.shape[-1] != self.control_dim:
            raise ValueError(
                f"{self.name}: control has dimension {u.shape[-1]}, expected {self.control_dim}"
            )
        return self.drift(x) + self.control_effect(x, u)

    def hamiltonian(self, x, p):
        """``max_u p . f(x, u)`` in closed form over the control box."""
        x = _as_array(x)
        p = _as_array(p)
        self._check_state(x)
        self._check_state(p)
        xp = _xp(x)
        c = self.control_gain(x, p)
        lo, hi = self._bound_arrays(c)
        return (p * self.drift(x)).sum(-1) + xp.maximum(c * hi, c * lo).sum(-1)

    def optimal_control(self, x, p):
        """Maximiser of ``p . f(x, u)``; channels with zero gain go to the upper bound."""
        x = _as_array(x)
        p = _as_array(p)
        self._check_state(x)
        self._check_state(p)
        xp = _xp(x)
        c = self.control_gain(x, p)
        lo, hi = self._bound_arrays(c)
        return xp.where(c >= 0, hi + 0 * c, lo + 0 * c)

    def _bound_arrays(self, like):
        if isinstance(like, torch.Tensor):
            return (
                torch.as_tensor(self.bounds.lo, dtype=like.dtype),
                torch.as_tensor(self.bounds.hi, dtype=like.dtype),
            )
        return self.bounds.lo, self.bounds.hi

    def wrap(self, x):
        """Wrap periodic coordinates to [-pi, pi)."""
        if not self.periodic_dims:
            return x
        if isinstance(x, torch.Tensor):
            x = x.clone()
        else:
            x = np.array(x, dtype=np.float64, copy=True)
        for d in self.periodic_dims:
            x[..., d] = wrap_angle(x[..., d])
        return x

    @property
    def domain_lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.domain])

    @property
    def domain_upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.domain])

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.domain_lower, self.domain_upper
        return lo + (hi - lo) * rng.random((n, self.state_dim))

    def config(self) -> dict:
        out = {"name": self.name}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = [list(v) for v in val] if f.name == "domain" else val
        for k, v in list(out.items()):
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def _pi_domain(spatial: float = 1.0) -> tuple[tuple[float, float], ...]:
    return ((-spatial, spatial), (-spatial, spatial), (-math.pi, math.pi))


@dataclass(frozen=True)
class Integrator1D(SystemModel):
    """``xdot = u`` with ``l(x) = x``; used to check solvers against analytic answers."""

    u_max: float = 1.0
    domain: tuple[tuple[float, float], ...] = ((-2.0, 2.0),)

    name: ClassVar[str] = "integrator1d"
    state_dim: ClassVar[int] = 1
    control_dim: ClassVar[int] = 1
    periodic_dims: ClassVar[tuple[int, ...]] = ()

    @property
    def bounds(self) -> ControlBounds:
        return ControlBounds.symmetric(self.u_max)

    def drift(self, x):
        return 0 * x

    def control_effect(self, x, u):
        return u + 0 * x

    def control_gain(self, x, p):
        return p + 0 * x

    def boundary(self, x):
        x = _as_array(x)
        self._check_state(x)
        return x[..., 0]

    def boundary_gradient(self, x):
        x = _as_array(x)
        return 0 * x + 1

    def dissipation(self, mins, maxs):
        return np.array([max(abs(v) for v in self.bounds.lower + self.bounds.upper)])


@dataclass(frozen=True)
class Dubins3D(SystemModel):
    """Dubins car ``(x, y, theta)`` at fixed speed avoiding a circular obstacle."""

    v: float = 0.6
    u_max: float = 1.1
    obstacle_center: tuple[float, float] = (0.0, 0.0)
    obstacle_radius: float = 0.5
    domain: tuple[tuple[float, float], ...] = field(default_factory=_pi_domain)

    name: ClassVar[str] = "dubins3d"
    state_dim: ClassVar[int] = 3
    control_dim: ClassVar[int] = 1
    periodic_dims: ClassVar[tuple[int, ...]] = (2,)

    @property
    def bounds(self) -> ControlBounds:
        return ControlBounds.symmetric(self.u_max)

    def drift(self, x):
        xp = _xp(x)
        th = x[..., 2]
        return _stack([self.v * xp.cos(th), self.v * xp.sin(th), 0 * th], x)

    def control_effect(self, x, u):
        z = 0 * x[..., 0]
        return _stack([z, z, u[..., 0] + z], x)

    def control_gain(self, x, p):
        return p[..., 2:3] + 0 * x[..., 2:3]

    def boundary(self, x):
        x = _as_array(x)
        self._check_state(x)
        xp = _xp(x)
        cx, cy = self.obstacle_center
        return xp.sqrt((x[..., 0] - cx) ** 2 + (x[..., 1] - cy) ** 2) - self.obstacle_radius

    def boundary_gradient(self, x):
        x = _as_array(x)
        xp = _xp(x)
        cx, cy = self.obstacle_center
        dx, dy = x[..., 0] - cx, x[..., 1] - cy
        r = xp.sqrt(dx**2 + dy**2)
        safe = xp.where(r > 0, r, 1.0 + 0 * r)
        gx = xp.where(r > 0, dx / safe, 0 * r)
        gy = xp.where(r > 0, dy / safe, 0 * r)
        return _stack([gx, gy, 0 * r], x)

    def dissipation(self, mins, maxs):
        u = max(abs(v) for v in self.bounds.lower + self.bounds.upper)
        return np.array([self.v, self.v, u])


@dataclass(frozen=True)
class Air3D(SystemModel):
    """Relative state ``(x, y, psi)`` of another vehicle in the ego frame.

    Controls are ``(u_ego, u_other)``; both vehicles cooperate, so both
    maximise the Hamiltonian. The failure set is a disc of
    ``collision_radius`` around the ego vehicle.
    """

    v_ego: float = 0.6
    v_other: float = 0.6
    u_max: float = 1.1
    collision_radius: float = 0.4
    domain: tuple[tuple[float, float], ...] = field(default_factory=lambda: _pi_domain(2.0))

    name: ClassVar[str] = "air3d"
    state_dim: ClassVar[int] = 3
    control_dim: ClassVar[int] = 2
    periodic_dims: ClassVar[tuple[int, ...]] = (2,)

    @property
    def bounds(self) -> ControlBounds:
        return ControlBounds.symmetric(self.u_max, 2)

    def drift(self, x):
        xp = _xp(x)
        psi = x[..., 2]
        return _stack(
            [-self.v_ego + self.v_other * xp.cos(psi), self.v_other * xp.sin(psi), 0 * psi], x
        )

    def control_effect(self, x, u):
        ua, ub = u[..., 0], u[..., 1]
        return _stack([ua * x[..., 1], -ua * x[..., 0], ub - ua], x)

    def control_gain(self, x, p):
        ca = p[..., 0] * x[..., 1] - p[..., 1] * x[..., 0] - p[..., 2]
        cb = p[..., 2] + 0 * x[..., 2]
        return _stack([ca, cb], x)

    def boundary(self, x):
        x = _as_array(x)
        self._check_state(x)
        xp = _xp(x)
        return xp.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2) - self.collision_radius

    def boundary_gradient(self, x):
        x = _as_array(x)
        xp = _xp(x)
        r = xp.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
        safe = xp.where(r > 0, r, 1.0 + 0 * r)
        gx = xp.where(r > 0, x[..., 0] / safe, 0 * r)
        gy = xp.where(r > 0, x[..., 1] / safe, 0 * r)
        return _stack([gx, gy, 0 * r], x)

    def dissipation(self, mins, maxs):
        u = max(abs(v) for v in self.bounds.lower + self.bounds.upper)
        ymax = max(abs(mins[1]), abs(maxs[1]))
        xmax = max(abs(mins[0]), abs(maxs[0]))
        return np.array(
            [self.v_ego + self.v_other + u * ymax, self.v_other + u * xmax, 2 * u]
        )


@dataclass(frozen=True)
class MultiVehicle9D(SystemModel):
    """Three stacked Dubins cars ``(x_i, y_i, theta_i)`` avoiding each other."""

    v: float = 0.6
    u_max: float = 1.1
    collision_radius: float = 0.25
    domain: tuple[tuple[float, float], ...] = field(default_factory=lambda: _pi_domain() * 3)

    name: ClassVar[str] = "multivehicle9d"
    state_dim: ClassVar[int] = 9
    control_dim: ClassVar[int] = 3
    periodic_dims: ClassVar[tuple[int, ...]] = (2, 5, 8)
    n_agents: ClassVar[int] = 3

    def __post_init__(self):
        if self.collision_radius <= 0:
            raise ValueError("collision_radius must be positive")

    @property
    def bounds(self) -> ControlBounds:
        return ControlBounds.symmetric(self.u_max, self.n_agents)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        n = self.n_agents
        return [(i, j) for i in range(n) for j in range(i + 1, n)]

    def agent(self) -> Dubins3D:
        return Dubins3D(v=self.v, u_max=self.u_max)

    def drift(self, x):
        xp = _xp(x)
        parts = []
        for i in range(self.n_agents):
            th = x[..., 3 * i + 2]
            parts += [self.v * xp.cos(th), self.v * xp.sin(th), 0 * th]
        return _stack(parts, x)

    def control_effect(self, x, u):
        z = 0 * x[..., 0]
        parts = []
        for i in range(self.n_agents):
            parts += [z, z, u[..., i] + z]
        return _stack(parts, x)

    def control_gain(self, x, p):
        idx = [3 * i + 2 for i in range(self.n_agents)]
        return p[..., idx] + 0 * x[..., idx]

    def _pair_distances(self, x):
        xp = _xp(x)
        d = [
            xp.sqrt(
                (x[..., 3 * i] - x[..., 3 * j]) ** 2 + (x[..., 3 * i + 1] - x[..., 3 * j + 1]) ** 2
            )
            for i, j in self.pairs
        ]
        return _stack(d, x)

    def boundary(self, x):
        x = _as_array(x)
        self._check_state(x)
        d = self._pair_distances(x)
        if isinstance(d, torch.Tensor):
            return d.min(dim=-1).values - self.collision_radius
        return d.min(axis=-1) - self.collision_radius

    def boundary_gradient(self, x):
        """Gradient of the closest pair's distance; ties go to the lowest pair index."""
        x = _as_array(x)
        xp = _xp(x)
        d = self._pair_distances(x)
        k = d.argmin(dim=-1) if isinstance(d, torch.Tensor) else d.argmin(axis=-1)
        grad = 0 * x
        cols = [grad[..., c] for c in range(self.state_dim)]
        for idx, (i, j) in enumerate(self.pairs):
            dist = d[..., idx]
            active = (k == idx) & (dist > 0)
            safe = xp.where(dist > 0, dist, 1.0 + 0 * dist)
            nx = xp.where(active, (x[..., 3 * i] - x[..., 3 * j]) / safe, 0 * dist)
            ny = xp.where(active, (x[..., 3 * i + 1] - x[..., 3 * j + 1]) / safe, 0 * dist)
            cols[3 * i] = cols[3 * i] + nx
            cols[3 * i + 1] = cols[3 * i + 1] + ny
            cols[3 * j] = cols[3 * j] - nx
            cols[3 * j + 1] = cols[3 * j + 1] - ny
        return _stack(cols, x)

    def dissipation(self, mins, maxs):
        u = max(abs(v) for v in self.bounds.lower + self.bounds.upper)
        return np.array([self.v, self.v, u] * self.n_agents)


SYSTEMS: dict[str, type[SystemModel]] = {
    cls.name: cls for cls in (Integrator1D, Dubins3D, Air3D, MultiVehicle9D)
}


def make_system(name: str, **overrides) -> SystemModel:
    """Build a system by name with optional parameter overrides."""
    try:
        cls = SYSTEMS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"{name}: unknown parameters {sorted(unknown)}")
    kwargs = {}
    for k, v in overrides.items():
        if k == "domain":
            v = tuple(tuple(float(a) for a in pair) for pair in v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def rk4_step(system: SystemModel, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step with ``u`` held constant, followed by angle wrapping."""
    k1 = system.flow(x, u)
    k2 = system.flow(x + 0.5 * dt * k1, u)
    k3 = system.flow(x + 0.5 * dt * k2, u)
    k4 = system.flow(x + dt * k3, u)
    return system.wrap(x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))


def _n_steps(dt: float, horizon: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least dt")
    return int(math.floor(horizon / dt + 1e-9))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        if len(self.states) != len(self.times) or len(self.controls) != len(self.times) - 1:
            raise ValueError("inconsistent trajectory lengths")


def integrate(
    system: SystemModel,
    x0,
    policy: Callable[[np.ndarray, float], np.ndarray],
    dt: float = 0.01,
    horizon: float = 1.0,
) -> Trajectory:
    """Roll out ``policy(x, t)`` with fixed-step RK4 and zero-order-hold control.

    Out-of-bounds controls are clamped and flagged on the trajectory.
    """
    steps = _n_steps(dt, horizon)
    x = system.wrap(np.asarray(x0, dtype=np.float64))
    states = [x]
    controls = []
    clamped = False
    for k in range(steps):
        t = k * dt
        u = np.atleast_1d(np.asarray(policy(x, t), dtype=np.float64))
        if not system.bounds.contains(u):
            clamped = True
            u = system.bounds.clip(u)
        controls.append(u)
        x = rk4_step(system, x, u, dt)
        states.append(x)
    if clamped:
        warnings.warn("policy output left the control bounds and was clamped", stacklevel=2)
    return Trajectory(
        times=np.arange(steps + 1) * dt,
        states=np.array(states),
        controls=np.array(controls).reshape(steps, system.control_dim),
        clamped=clamped,
    )


def rollout_batch(
    system: SystemModel,
    x0: np.ndarray,
    policy: Callable[[np.ndarray, float], np.ndarray],
    dt: float = 0.01,
    horizon: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised rollouts of many initial states.

    Returns ``(states, min_boundary)`` where ``states`` is the final state of
    each rollout and ``min_boundary`` is ``min_s l(x(s))`` over every step,
    initial state included.
    """
    steps = _n_steps(dt, horizon)
    x = system.wrap(np.asarray(x0, dtype=np.float64))
    lmin = system.boundary(x)
    for k in range(steps):
        u = system.bounds.clip(np.asarray(policy(x, k * dt), dtype=np.float64))
        x = rk4_step(system, x, u.reshape(len(x), system.control_dim), dt)
        lmin = np.minimum(lmin, system.boundary(x))
    return x, lmin
