"""Split-conformal safety margins for learned values.

Each calibration rollout starts at a uniform ``x0`` and follows the policy
induced by the value gradient. Its score is ``predicted - realized`` with
``predicted = V(x0, tau=horizon)`` and ``realized = min_s l(x(s))``. The
margin ``delta`` is the ``ceil((n + 1)(1 - eps))``-th smallest score, so a
fresh exchangeable rollout satisfies ``realized >= predicted - delta`` with
probability at least ``1 - eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .dynamics import rollout_batch
from .network import ValueNet
from .providers import NetProvider, ShiftedProvider, ValueProvider

__all__ = [
    "CalibrationError",
    "CalibrationRecord",
    "CalibrationSet",
    "DeltaCurve",
    "conformal_rank",
    "min_calibration_size",
    "collect",
    "calibrate",
    "shift",
    "safe_volume_fraction",
    "curve",
]


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationRecord:
    x0: np.ndarray
    gamma: float
    predicted: float
    realized_cost: float

    @property
    def score(self) -> float:
        return self.predicted - self.realized_cost


@dataclass
class CalibrationSet:
    """Columnar store of calibration rollouts."""

    x0: np.ndarray
    gamma: np.ndarray
    predicted: np.ndarray
    realized_cost: np.ndarray

    def __len__(self) -> int:
        return len(self.predicted)

    @property
    def scores(self) -> np.ndarray:
        return self.predicted - self.realized_cost

    def __iter__(self) -> Iterator[CalibrationRecord]:
        for i in range(len(self)):
            yield CalibrationRecord(
                self.x0[i], float(self.gamma[i]), float(self.predicted[i]),
                float(self.realized_cost[i]),
            )

    def rows(self):
        for rec in self:
            yield [*rec.x0.tolist(), rec.gamma, rec.predicted, rec.realized_cost, rec.score]

    def header(self) -> list[str]:
        d = self.x0.shape[1]
        return [f"x{i}" for i in range(d)] + ["gamma", "predicted", "realized_cost", "score"]


@dataclass
class DeltaCurve:
    gamma: float
    epsilons: list[float]
    deltas: list[float]
    n: int
    safe_volume_fraction: list[float] = field(default_factory=list)

    def rows(self):
        vols = self.safe_volume_fraction or [math.nan] * len(self.epsilons)
        for eps, delta, vol in zip(self.epsilons, self.deltas, vols):
            yield [self.gamma, eps, delta, self.n, vol]

    header = ["gamma", "epsilon", "delta", "n", "safe_volume_fraction"]


def conformal_rank(n: int, epsilon: float) -> int:
    """1-based rank ``ceil((n + 1)(1 - epsilon))``, guarded against float round-up."""
    return math.ceil((n + 1) * (1.0 - epsilon) - 1e-9)


def min_calibration_size(epsilon: float) -> int:
    n = max(1, math.floor(1.0 / epsilon) - 2)
    while conformal_rank(n, epsilon) > n:
        n += 1
    return n


def _as_provider(value) -> ValueProvider:
    return NetProvider(value) if isinstance(value, ValueNet) else value


def collect(
    value: ValueProvider | ValueNet,
    gamma: float,
    n: int,
    rng: np.random.Generator,
    horizon: float | None = None,
    dt: float = 0.01,
) -> CalibrationSet:
    """Roll out ``n`` uniform initial states under the value's optimal policy."""
    if n < 1:
        raise ValueError("n must be at least 1")
    provider = _as_provider(value)
    system = provider.system
    horizon = provider.horizon if horizon is None else horizon
    x0 = system.sample_states(n, rng)
    predicted = np.asarray(provider.value(x0, gamma, tau=horizon), dtype=np.float64)

    def policy(x, t):
        _, grad = provider.value_and_gradient(x, gamma, tau=max(horizon - t, 0.0))
        return system.optimal_control(x, grad)

    _, realized = rollout_batch(system, x0, policy, dt=dt, horizon=horizon)
    return CalibrationSet(x0, np.full(n, float(gamma)), predicted, realized)


def calibrate(scores, epsilon: float) -> float:
    """Conformal margin for violation probability ``epsilon``."""
    if isinstance(scores, CalibrationSet):
        scores = scores.scores
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if not 0.0 < epsilon < 1.0:
        raise CalibrationError("epsilon must lie in (0, 1)")
    n = len(scores)
    k = conformal_rank(n, epsilon)
    if k > n:
        raise CalibrationError(
            f"{n} calibration scores are too few for epsilon={epsilon}; "
            f"need at least {min_calibration_size(epsilon)}"
        )
    return float(np.partition(scores, k - 1)[k - 1])


def shift(value: ValueProvider | ValueNet, delta: float) -> ShiftedProvider:
    return ShiftedProvider(_as_provider(value), delta)


def safe_volume_fraction(
    value: ValueProvider | ValueNet,
    gamma: float,
    delta: float,
    rng: np.random.Generator,
    n: int = 100_000,
    tau: float | None = None,
    samples: np.ndarray | None = None,
) -> float:
    """Monte Carlo share of the domain where ``V - delta > 0``."""
    provider = _as_provider(value)
    x = provider.system.sample_states(n, rng) if samples is None else samples
    return float(np.mean(provider.value(x, gamma, tau=tau) - delta > 0))


def curve(
    value: ValueProvider | ValueNet,
    gamma_list: Sequence[float],
    epsilon_list: Sequence[float],
    n: int,
    rng: np.random.Generator,
    horizon: float | None = None,
    dt: float = 0.01,
    volume_samples: int = 100_000,
) -> list[DeltaCurve]:
    """One ``(epsilon, delta)`` curve per gamma, with shifted safe-set volumes."""
    provider = _as_provider(value)
    vol_x = provider.system.sample_states(volume_samples, rng)
    out = []
    for gamma in gamma_list:
        cal = collect(provider, gamma, n, rng, horizon=horizon, dt=dt)
        deltas = [calibrate(cal, eps) for eps in epsilon_list]
        tau = provider.horizon if horizon is None else horizon
        base = provider.value(vol_x, gamma, tau=tau)
        vols = [float(np.mean(base - d > 0)) for d in deltas]
        out.append(DeltaCurve(float(gamma), list(map(float, epsilon_list)), deltas, n, vols))
    return out
