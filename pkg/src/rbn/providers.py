"""Value providers: one interface over grid, network and shifted values.

A provider answers ``value_and_gradient(x, gamma, tau)`` for a single state
``(n,)`` or a batch ``(m, n)`` and returns numpy values and state gradients.
``tau`` defaults to the provider's horizon (the most converged slice).
"""
from __future__ import annotations

import bisect
from typing import Mapping, Sequence

import numpy as np

from .dynamics import SystemModel
from .grid_solver import GridValue, query
from .network import ValueNet

__all__ = ["ValueProvider", "NetProvider", "GridProvider", "ShiftedProvider", "shift"]


class ValueProvider:
    system: SystemModel
    horizon: float

    def value_and_gradient(self, x, gamma: float, tau: float | None = None):
        raise NotImplementedError

    def value(self, x, gamma: float, tau: float | None = None):
        return self.value_and_gradient(x, gamma, tau)[0]


def _clamp_states(system: SystemModel, x) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    lo, hi = system.domain_lower, system.domain_upper
    for d in range(system.state_dim):
        if d not in system.periodic_dims:
            x[..., d] = np.clip(x[..., d], lo[d], hi[d])
    return x


class NetProvider(ValueProvider):
    """Network-backed values; ``clamp`` pins non-periodic coordinates to the training domain."""

    def __init__(self, net: ValueNet, clamp: bool = False):
        self.net = net
        self.system = net.system
        self.horizon = net.t_f
        self.clamp = clamp

    def value_and_gradient(self, x, gamma, tau=None):
        tau = self.horizon if tau is None else tau
        if self.clamp:
            x = _clamp_states(self.system, x)
        return self.net.value_and_gradient(x, tau, gamma)


class GridProvider(ValueProvider):
    """Grid-backed values, keyed by gamma, linearly interpolated between tau snapshots."""

    def __init__(
        self,
        system: SystemModel,
        snapshots: Mapping[float, GridValue | Sequence[GridValue]],
        clamp: bool = False,
    ):
        self.system = system
        self.clamp = clamp
        self._snaps: dict[float, list[GridValue]] = {}
        for gamma, snaps in snapshots.items():
            if isinstance(snaps, GridValue):
                snaps = [snaps]
            self._snaps[float(gamma)] = sorted(snaps, key=lambda s: s.time)
        self.horizon = min(s[-1].time for s in self._snaps.values())

    @property
    def gammas(self) -> list[float]:
        return sorted(self._snaps)

    def _lookup(self, gamma: float) -> list[GridValue]:
        for g, snaps in self._snaps.items():
            if abs(g - gamma) <= 1e-9:
                return snaps
        raise ValueError(f"no grid solution for gamma={gamma}; available {self.gammas}")

    def value_and_gradient(self, x, gamma, tau=None):
        snaps = self._lookup(gamma)
        tau = snaps[-1].time if tau is None else float(tau)
        times = [s.time for s in snaps]
        if len(snaps) == 1 or tau >= times[-1]:
            return query(snaps[-1], x, clamp=self.clamp)
        if tau <= times[0]:
            return query(snaps[0], x, clamp=self.clamp)
        k = bisect.bisect_right(times, tau)
        a, b = snaps[k - 1], snaps[k]
        w = (tau - a.time) / (b.time - a.time)
        va, ga = query(a, x, clamp=self.clamp)
        vb, gb = query(b, x, clamp=self.clamp)
        return (1 - w) * va + w * vb, (1 - w) * ga + w * gb


class ShiftedProvider(ValueProvider):
    """``V - delta`` with gradients passed through untouched."""

    def __init__(self, base: ValueProvider, delta: float):
        self.base = base
        self.delta = float(delta)
        self.system = base.system
        self.horizon = base.horizon

    def value_and_gradient(self, x, gamma, tau=None):
        V, grad = self.base.value_and_gradient(x, gamma, tau)
        return V - self.delta, grad


def shift(provider: ValueProvider | ValueNet, delta: float) -> ShiftedProvider:
    if isinstance(provider, ValueNet):
        provider = NetProvider(provider)
    return ShiftedProvider(provider, delta)
