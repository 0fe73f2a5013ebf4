"""CBF-QP safety filter and the least-restrictive switching baseline.

For a control-affine system the barrier condition
``dV/dx . f(x, u) >= -gamma V`` is a single halfspace ``a . u >= b`` with
``a = dV/dx^T G(x)`` and ``b = -gamma V - dV/dx . drift(x)``. The filter
solves ``min ||u - u_nom||^2`` over that halfspace intersected with the
control box, exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import SystemModel
from .providers import ValueProvider

__all__ = [
    "FilterResult",
    "barrier_constraint",
    "project_box_halfspace",
    "qp_filter",
    "least_restrictive",
]


@dataclass
class FilterResult:
    control: np.ndarray
    constraint_active: bool
    feasible: bool
    barrier_value: float
    constraint_slack: float


def barrier_constraint(system: SystemModel, x, V, grad, gamma: float):
    """Halfspace ``(a, b)`` of the barrier condition at ``x``."""
    a = system.control_gain(x, grad)
    b = -gamma * V - (grad * system.drift(x)).sum(-1)
    return a, b


def project_box_halfspace(a, b, u_nom, lo, hi):
    """Exact ``argmin ||u - u_nom||^2`` s.t. ``a . u >= b``, ``lo <= u <= hi``.

    Works on a single problem (1-D ``a``) or a batch (``a`` of shape ``(B, m)``).
    The KKT point is ``clip(u_nom + lam a)`` for the smallest ``lam >= 0``
    meeting the constraint. ``a . clip(u_nom + lam a)`` is piecewise linear
    and nondecreasing in ``lam``, so ``lam`` is found exactly between the
    sorted breakpoints where channels hit their bounds.

    Returns ``(u, feasible)``. When infeasible, ``u`` maximises ``a . u``
    over the box and keeps channels with ``a_i = 0`` at ``clip(u_nom)``.
    """
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    B, m = a.shape
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), (B,))
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (B, m))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (B, m))
    un = np.broadcast_to(np.asarray(u_nom, dtype=np.float64), (B, m))
    u0 = np.clip(un, lo, hi)

    best = np.where(a > 0, hi, np.where(a < 0, lo, u0))
    feasible = (a * best).sum(1) >= b
    satisfied = (a * u0).sum(1) >= b

    nz = a != 0
    safe_a = np.where(nz, a, 1.0)
    with np.errstate(over="ignore"):
        t_lo = np.where(nz, (lo - un) / safe_a, 0.0)
        t_hi = np.where(nz, (hi - un) / safe_a, 0.0)
    bps = np.sort(np.maximum(np.concatenate([np.zeros((B, 1)), t_lo, t_hi], axis=1), 0.0), axis=1)

    def g(lam):
        return (a * np.clip(un + lam[:, None] * a, lo, hi)).sum(1)

    G = np.stack([g(bps[:, k]) for k in range(bps.shape[1])], axis=1)
    # first breakpoint where the constraint holds; the last one always does when feasible
    j = np.maximum(np.argmax(G >= b[:, None], axis=1), 1)
    rows = np.arange(B)
    l0, l1 = bps[rows, j - 1], bps[rows, j]
    g0, g1 = G[rows, j - 1], G[rows, j]
    slope = g1 - g0
    with np.errstate(over="ignore", invalid="ignore"):
        lam = np.where(slope > 0, l0 + (b - g0) * (l1 - l0) / np.where(slope > 0, slope, 1.0), l1)
        u = np.clip(un + lam[:, None] * a, lo, hi)
    # breakpoints overflow only for subnormal gains; the saturated point is then exact
    u = np.where(np.isfinite(u), u, best)
    u = np.where(satisfied[:, None], u0, u)
    u = np.where(feasible[:, None], u, best)
    if single:
        return u[0], bool(feasible[0])
    return u, feasible


def qp_filter(
    provider: ValueProvider,
    system: SystemModel,
    x,
    gamma: float,
    u_nom,
    tau: float | None = None,
) -> FilterResult:
    """Minimally modify ``u_nom`` so the barrier condition holds at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    u_nom = system.bounds.clip(np.atleast_1d(np.asarray(u_nom, dtype=np.float64)))
    if not np.all(np.isfinite(u_nom)):
        raise ValueError("nominal control must be finite")
    V, grad = provider.value_and_gradient(x, gamma, tau)
    a, b = barrier_constraint(system, x, V, grad, gamma)
    b = float(b)
    satisfied = float(a @ u_nom) >= b
    u, feasible = project_box_halfspace(a, b, u_nom, system.bounds.lo, system.bounds.hi)
    return FilterResult(
        control=u,
        constraint_active=not satisfied,
        feasible=feasible,
        barrier_value=float(V),
        constraint_slack=float(a @ u) - b,
    )


def least_restrictive(
    provider: ValueProvider,
    system: SystemModel,
    x,
    gamma: float,
    u_nom,
    threshold: float = 0.0,
    tau: float | None = None,
) -> FilterResult:
    """``u_nom`` while ``V > threshold``, else the optimal safe control."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    u_nom = system.bounds.clip(np.atleast_1d(np.asarray(u_nom, dtype=np.float64)))
    V, grad = provider.value_and_gradient(x, gamma, tau)
    a, b = barrier_constraint(system, x, V, grad, gamma)
    switch = float(V) <= threshold
    u = system.optimal_control(x, grad) if switch else u_nom
    return FilterResult(
        control=np.asarray(u, dtype=np.float64),
        constraint_active=switch,
        feasible=True,
        barrier_value=float(V),
        constraint_slack=float(a @ u) - float(b),
    )
