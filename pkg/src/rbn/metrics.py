"""Set-agreement and rollout-classification metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .dynamics import rollout_batch
from .filter import barrier_constraint, project_box_halfspace
from .providers import ValueProvider

__all__ = [
    "SetComparison",
    "RolloutClassification",
    "compare_sets",
    "compare_providers",
    "classify",
    "classify_rollouts",
    "learned_batch_policy",
    "qp_batch_policy",
]


@dataclass(frozen=True)
class SetComparison:
    iou: float
    fi: float
    fe: float
    n_points: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RolloutClassification:
    fpr: float
    fnr: float
    cc: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def compare_sets(truth_values, learned_values, level: float = 0.0) -> SetComparison:
    """IOU, falsely included and falsely excluded shares of ``{V > level}``.

    FI and FE are normalised by the total point count.
    """
    t = np.asarray(truth_values).ravel() > level
    s = np.asarray(learned_values).ravel() > level
    if t.shape != s.shape:
        raise ValueError("value arrays must cover the same points")
    n = t.size
    union = int(np.count_nonzero(t | s))
    inter = int(np.count_nonzero(t & s))
    fi = np.count_nonzero(s & ~t) / n
    fe = np.count_nonzero(t & ~s) / n
    if union == 0:
        return SetComparison(1.0, fi, fe, n, degenerate=True)
    return SetComparison(inter / union, fi, fe, n)


def compare_providers(
    truth: ValueProvider,
    learned: ValueProvider,
    points: np.ndarray,
    gamma: float,
    level: float = 0.0,
    tau: float | None = None,
) -> SetComparison:
    return compare_sets(
        truth.value(points, gamma, tau=tau), learned.value(points, gamma, tau=tau), level
    )


def classify(predicted_safe, collided) -> RolloutClassification:
    predicted_safe = np.asarray(predicted_safe, dtype=bool)
    collided = np.asarray(collided, dtype=bool)
    n = predicted_safe.size
    fpr = np.count_nonzero(predicted_safe & collided) / n
    fnr = np.count_nonzero(~predicted_safe & ~collided) / n
    return RolloutClassification(fpr, fnr, 1.0 - fpr - fnr, n)


def learned_batch_policy(provider: ValueProvider, gamma: float, horizon: float) -> Callable:
    system = provider.system

    def policy(x, t):
        _, grad = provider.value_and_gradient(x, gamma, tau=max(horizon - t, 0.0))
        return system.optimal_control(x, grad)

    return policy


def qp_batch_policy(
    provider: ValueProvider,
    gamma: float,
    nominal: Callable[[np.ndarray, float], np.ndarray],
    tau: float | None = None,
) -> Callable:
    """Batched CBF-QP filtering of ``nominal`` at a fixed time slice."""
    system = provider.system

    def policy(x, t):
        V, grad = provider.value_and_gradient(x, gamma, tau=tau)
        a, b = barrier_constraint(system, x, V, grad, gamma)
        u_nom = np.asarray(nominal(x, t), dtype=np.float64).reshape(len(x), system.control_dim)
        u, _ = project_box_halfspace(a, b, u_nom, system.bounds.lo, system.bounds.hi)
        return u

    return policy


def classify_rollouts(
    provider: ValueProvider,
    x0: np.ndarray,
    gamma: float,
    delta: float = 0.0,
    policy: str | Callable = "learned",
    horizon: float | None = None,
    dt: float = 0.01,
    nominal: Callable | None = None,
) -> RolloutClassification:
    """Predicted safe iff ``V - delta >= 0`` at ``tau = horizon``; collision iff ``min l < 0``.

    ``policy`` is ``"learned"`` (optimal control from the value gradient),
    ``"qp"`` (``nominal`` filtered through the CBF-QP), or a batched callable.
    """
    system = provider.system
    horizon = provider.horizon if horizon is None else horizon
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    predicted_safe = provider.value(x0, gamma, tau=horizon) - delta >= 0
    if policy == "learned":
        fn = learned_batch_policy(provider, gamma, horizon)
    elif policy == "qp":
        if nominal is None:
            raise ValueError("the qp policy needs a nominal controller")
        fn = qp_batch_policy(provider, gamma, nominal)
    else:
        fn = policy
    _, lmin = rollout_batch(system, x0, fn, dt=dt, horizon=horizon)
    return classify(predicted_safe, lmin < 0)
