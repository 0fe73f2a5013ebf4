"""Dynamic-programming solver for the discounted reach-avoid variational inequality.

Values live on a rectilinear grid and are advanced in time-to-go ``tau``
with a first-order Lax-Friedrichs Hamiltonian and forward Euler:

    V' = min(l, V + dt * (H_LF + gamma * V))

Time-to-go ``tau = t_f - t`` runs forward, so the terminal condition
``V(x, t_f) = l(x)`` becomes the initial snapshot at ``tau = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .dynamics import SystemModel

__all__ = [
    "Grid",
    "GridValue",
    "CFLError",
    "QueryError",
    "initialize",
    "dissipation_coefficients",
    "max_stable_dt",
    "lax_friedrichs_hamiltonian",
    "numerical_hamiltonian",
    "step",
    "solve",
    "query",
]

CFL = 0.5


class CFLError(ValueError):
    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"dt={dt:g} violates the CFL bound; admissible dt <= {dt_max:g}")
        self.dt_max = dt_max


class QueryError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Rectilinear grid. Periodic dims store ``count`` nodes; ``maxs`` aliases ``mins``."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    counts: tuple[int, ...]
    periodic: tuple[bool, ...]

    def __post_init__(self):
        n = len(self.mins)
        if not (len(self.maxs) == len(self.counts) == len(self.periodic) == n):
            raise ValueError("grid fields have inconsistent lengths")
        for lo, hi, c in zip(self.mins, self.maxs, self.counts):
            if c < 3:
                raise ValueError("each grid dimension needs at least 3 nodes")
            if not lo < hi:
                raise ValueError(f"grid bounds [{lo}, {hi}] are empty")
        object.__setattr__(self, "mins", tuple(float(v) for v in self.mins))
        object.__setattr__(self, "maxs", tuple(float(v) for v in self.maxs))
        object.__setattr__(self, "counts", tuple(int(v) for v in self.counts))
        object.__setattr__(self, "periodic", tuple(bool(v) for v in self.periodic))

    @classmethod
    def for_system(cls, system: SystemModel, counts: Sequence[int], domain=None) -> "Grid":
        domain = system.domain if domain is None else domain
        periodic = tuple(d in system.periodic_dims for d in range(system.state_dim))
        return cls(
            mins=tuple(lo for lo, _ in domain),
            maxs=tuple(hi for _, hi in domain),
            counts=tuple(counts),
            periodic=periodic,
        )

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def spacing(self) -> np.ndarray:
        return np.array(
            [
                (hi - lo) / (c if p else c - 1)
                for lo, hi, c, p in zip(self.mins, self.maxs, self.counts, self.periodic)
            ]
        )

    @property
    def axes(self) -> list[np.ndarray]:
        return [lo + h * np.arange(c) for lo, h, c in zip(self.mins, self.spacing, self.counts)]

    @cached_property
    def states(self) -> np.ndarray:
        """All node coordinates, shape ``counts + (ndim,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def node(self, index: Sequence[int]) -> np.ndarray:
        return np.array([ax[i] for ax, i in zip(self.axes, index)])


@dataclass
class GridValue:
    grid: Grid
    values: np.ndarray
    time: float = 0.0
    gamma: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @cached_property
    def gradient(self) -> np.ndarray:
        """Node-wise central differences, one-sided at non-periodic edges."""
        grads = []
        for d, (h, per) in enumerate(zip(self.grid.spacing, self.grid.periodic)):
            V = self.values
            if per:
                g = (np.roll(V, -1, axis=d) - np.roll(V, 1, axis=d)) / (2 * h)
            else:
                g = np.gradient(V, h, axis=d, edge_order=1)
            grads.append(g)
        return np.stack(grads, axis=-1)


def initialize(grid: Grid, system: SystemModel, gamma: float = 0.0) -> GridValue:
    if grid.ndim != system.state_dim:
        raise ValueError("grid dimension does not match the system state dimension")
    return GridValue(grid, system.boundary(grid.states), time=0.0, gamma=gamma)


def dissipation_coefficients(grid: Grid, system: SystemModel) -> np.ndarray:
    return np.asarray(system.dissipation(grid.mins, grid.maxs), dtype=np.float64)


def max_stable_dt(grid: Grid, system: SystemModel, cfl: float = CFL) -> float:
    alpha = dissipation_coefficients(grid, system)
    h = grid.spacing
    ratios = [hi / a for hi, a in zip(h, alpha) if a > 0]
    if not ratios:
        return math.inf
    return cfl * min(ratios) / grid.ndim


def _one_sided(V: np.ndarray, grid: Grid) -> list[tuple[np.ndarray, np.ndarray]]:
    """Forward/backward differences per dimension.

    Periodic dims wrap; other dims use linear ghost-node extrapolation,
    which makes the two one-sided differences coincide at the edges.
    """
    out = []
    for d, (h, per) in enumerate(zip(grid.spacing, grid.periodic)):
        if per:
            fwd = (np.roll(V, -1, axis=d) - V) / h
            bwd = (V - np.roll(V, 1, axis=d)) / h
        else:
            diff = np.diff(V, axis=d) / h
            first = np.take(diff, [0], axis=d)
            last = np.take(diff, [-1], axis=d)
            fwd = np.concatenate([diff, last], axis=d)
            bwd = np.concatenate([first, diff], axis=d)
        out.append((fwd, bwd))
    return out


def lax_friedrichs_hamiltonian(V: GridValue, system: SystemModel) -> np.ndarray:
    """Numerical Hamiltonian at every node.

    ``H(x, (D+ + D-)/2) + sum_i alpha_i (D+_i - D-_i) / 2``. The dissipation
    enters with a plus sign because values advance forward in ``tau`` as
    ``V_tau = H``; this makes the extra term a diffusion.
    """
    grid = V.grid
    diffs = _one_sided(V.values, grid)
    alpha = dissipation_coefficients(grid, system)
    p = np.stack([(f + b) / 2 for f, b in diffs], axis=-1)
    H = system.hamiltonian(grid.states, p)
    for a, (f, b) in zip(alpha, diffs):
        H = H + a * (f - b) / 2
    return H


def numerical_hamiltonian(V: GridValue, system: SystemModel, node: Sequence[int]) -> float:
    return float(lax_friedrichs_hamiltonian(V, system)[tuple(node)])


def step(
    V: GridValue,
    system: SystemModel,
    gamma: float,
    dt: float,
    boundary: np.ndarray | None = None,
) -> GridValue:
    """Advance ``V`` by ``dt`` in time-to-go."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    dt_max = max_stable_dt(V.grid, system)
    if dt < 0 or dt > dt_max * (1 + 1e-12):
        raise CFLError(dt, dt_max)
    l = system.boundary(V.grid.states) if boundary is None else boundary
    if dt == 0:
        new = np.minimum(l, V.values)
    else:
        H = lax_friedrichs_hamiltonian(V, system)
        new = np.minimum(l, V.values + dt * (H + gamma * V.values))
    return GridValue(V.grid, new, time=V.time + dt, gamma=gamma, meta=dict(V.meta))


def solve(
    grid: Grid,
    system: SystemModel,
    gamma: float,
    horizon: float,
    snapshot_times: Sequence[float] | None = None,
) -> list[GridValue]:
    """Solve up to ``horizon`` and return snapshots in ascending time-to-go.

    Between snapshots the solver takes equal sub-steps no larger than the
    CFL bound, so every snapshot lands exactly on its requested time.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    times = sorted(set([horizon] if snapshot_times is None else snapshot_times) | {horizon})
    if times[0] < 0 or times[-1] > horizon:
        raise ValueError("snapshot times must lie in [0, horizon]")
    dt_max = max_stable_dt(grid, system)
    l = system.boundary(grid.states)
    V = initialize(grid, system, gamma)
    out = []
    for target in times:
        span = target - V.time
        if span > 0:
            n = max(1, math.ceil(span / dt_max - 1e-12))
            dt = span / n
            for _ in range(n):
                V = step(V, system, gamma, dt, boundary=l)
            V.time = target
        out.append(V)
    for snap in out:
        snap.meta.update(
            {"system": system.config(), "gamma": gamma, "horizon": horizon, "cfl": CFL}
        )
    return out


def _prepare_points(grid: Grid, x, clamp: bool) -> np.ndarray:
    x = np.array(x, dtype=np.float64, ndmin=1, copy=True)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != grid.ndim:
        raise QueryError(f"query has dimension {x.shape[-1]}, grid has {grid.ndim}")
    for d in range(grid.ndim):
        lo, hi = grid.mins[d], grid.maxs[d]
        if grid.periodic[d]:
            x[:, d] = lo + np.remainder(x[:, d] - lo, hi - lo)
        elif clamp:
            x[:, d] = np.clip(x[:, d], lo, hi)
        else:
            tol = 1e-12 * (hi - lo)
            bad = (x[:, d] < lo - tol) | (x[:, d] > hi + tol)
            if np.any(bad):
                raise QueryError(f"query coordinate outside grid bounds in dimension {d}")
            x[:, d] = np.clip(x[:, d], lo, hi)
    return x, single


def _interpolate(grid: Grid, table: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``table`` (shape ``counts + trailing``) at points ``x``."""
    h = grid.spacing
    base = []
    frac = []
    for d in range(grid.ndim):
        s = (x[:, d] - grid.mins[d]) / h[d]
        c = grid.counts[d]
        if grid.periodic[d]:
            i0 = np.floor(s).astype(int)
            f = s - i0
            i0 = np.mod(i0, c)
        else:
            i0 = np.clip(np.floor(s).astype(int), 0, c - 2)
            f = s - i0
        base.append(i0)
        frac.append(f)
    trailing = table.shape[grid.ndim:]
    out = np.zeros((len(x),) + trailing)
    for corner in range(2**grid.ndim):
        w = np.ones(len(x))
        idx = []
        for d in range(grid.ndim):
            bit = (corner >> d) & 1
            i = base[d] + bit
            if grid.periodic[d]:
                i = np.mod(i, grid.counts[d])
            idx.append(i)
            w = w * (frac[d] if bit else 1 - frac[d])
        vals = table[tuple(idx)]
        out += w.reshape((-1,) + (1,) * len(trailing)) * vals
    return out


def query(V: GridValue, x, clamp: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated value and gradient at one point ``(n,)`` or a batch ``(m, n)``."""
    pts, single = _prepare_points(V.grid, x, clamp)
    val = _interpolate(V.grid, V.values, pts)
    grad = _interpolate(V.grid, V.gradient, pts)
    if single:
        return float(val[0]), grad[0]
    return val, grad
