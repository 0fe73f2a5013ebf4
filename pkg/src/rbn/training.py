"""Self-supervised training of the value network on the discounted VI residual."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dynamics import SystemModel
from .network import ValueNet

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "residual",
    "residual_loss",
    "sample_batch",
    "curriculum_progress",
    "train",
    "learned_policy",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30_000
    pretrain_epochs: int = 2_000
    samples_per_epoch: int = 8_000
    learning_rate: float = 1e-4
    gamma_range: tuple[float, float] = (0.0, 1.0)
    t_f: float = 1.0
    # share of the post-pretrain epochs over which the tau window opens
    curriculum_fraction: float = 1.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    hidden_layers: int = 3
    hidden_size: int = 128
    omega0: float = 30.0
    dtype: str = "float32"
    checkpoint_every: int = 0
    log_every: int = 1000

    def __post_init__(self):
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.betas = tuple(float(v) for v in self.betas)
        if self.pretrain_epochs > self.epochs:
            raise ValueError("pretrain_epochs exceeds epochs")
        if self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.curriculum_fraction <= 1:
            raise ValueError("curriculum_fraction must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_range"] = list(self.gamma_range)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    progress: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    pretrain_loss_start: float = math.nan
    pretrain_loss_end: float = math.nan
    checkpoints: list[str] = field(default_factory=list)

    def rows(self):
        return zip(self.epochs, self.losses, self.progress, self.seconds)


def residual(net: ValueNet, V, dVdx, dVdtau, x, tau, gamma) -> torch.Tensor:
    """Per-sample ``min{l - V, -dV/dtau + H(x, dV/dx) + gamma V}``."""
    l = net.system.boundary(x)
    ham = net.system.hamiltonian(x, dVdx)
    return torch.minimum(l - V, -dVdtau + ham + gamma * V)


def residual_loss(net: ValueNet, batch) -> torch.Tensor:
    """Mean absolute VI residual over a batch ``(x, tau, gamma)``; keeps the graph."""
    x, tau, gamma, _ = net._prepare(*batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    V, dVdx, dVdtau, _ = net._evaluate(x, tau, gamma, need_grad=True)
    return residual(net, V, dVdx, dVdtau, x, tau, gamma).abs().mean()


def curriculum_progress(epoch: int, config: TrainConfig) -> float:
    """Fraction of ``[0, t_f]`` open for sampling at ``epoch`` (0 during pretraining)."""
    if epoch < config.pretrain_epochs:
        return 0.0
    span = config.curriculum_fraction * (config.epochs - config.pretrain_epochs)
    if span <= 0:
        return 1.0
    return min(1.0, (epoch - config.pretrain_epochs + 1) / span)


def sample_batch(
    system: SystemModel,
    config: TrainConfig,
    progress: float,
    rng: np.random.Generator,
    n: int | None = None,
    domain: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Uniform states and gammas; tau uniform on ``[0, progress * t_f]``."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    n = config.samples_per_epoch if n is None else n
    lo, hi = (system.domain_lower, system.domain_upper) if domain is None else domain
    x = lo + (hi - lo) * rng.random((n, system.state_dim))
    g0, g1 = config.gamma_range
    gamma = g0 + (g1 - g0) * rng.random(n)
    tau = progress * config.t_f * rng.random(n)
    return x, tau, gamma


def _diagnostic(net: ValueNet, batch) -> str:
    norms = [float(t.detach().norm()) for t in net.params.tensors()]
    x, tau, gamma = batch
    return (
        f"parameter norms {['%.3g' % v for v in norms]}; last batch: "
        f"x in [{np.min(x):.3g}, {np.max(x):.3g}], tau in [{np.min(tau):.3g}, {np.max(tau):.3g}], "
        f"gamma in [{np.min(gamma):.3g}, {np.max(gamma):.3g}]"
    )


def train(
    system: SystemModel,
    net: ValueNet | None,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    save: Callable[[Path, ValueNet], None] | None = None,
) -> tuple[ValueNet, TrainReport]:
    """Adam on the residual loss: ``pretrain_epochs`` at tau = 0, then the tau curriculum.

    A fresh network is created from ``config`` when ``net`` is None. Set
    ``torch.set_num_threads(1)`` for bit-reproducible runs.
    """
    rngs = np.random.SeedSequence(config.seed).spawn(2)
    init_seed = int(rngs[0].generate_state(1)[0])
    rng = np.random.default_rng(rngs[1])
    if net is None:
        net = ValueNet.create(
            system, seed=init_seed, hidden_layers=config.hidden_layers,
            hidden_size=config.hidden_size, omega0=config.omega0, dtype=config.dtype,
            t_f=config.t_f, gamma_range=config.gamma_range,
        )
    tensors = net.params.tensors()
    for t in tensors:
        t.requires_grad_(True)
    opt = torch.optim.Adam(
        tensors, lr=config.learning_rate, betas=config.betas, eps=config.adam_eps
    )
    report = TrainReport()
    eval_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    eval_batch = sample_batch(system, config, 0.0, eval_rng, n=min(config.samples_per_epoch, 4096))

    def eval_boundary_loss() -> float:
        with torch.no_grad():
            return float(residual_loss(net, eval_batch))

    report.pretrain_loss_start = eval_boundary_loss()
    start = time.perf_counter()
    batch = None
    try:
        for epoch in range(config.epochs):
            if epoch == config.pretrain_epochs:
                report.pretrain_loss_end = eval_boundary_loss()
            progress = curriculum_progress(epoch, config)
            batch = sample_batch(system, config, progress, rng)
            loss = residual_loss(net, batch)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}: {_diagnostic(net, batch)}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            report.epochs.append(epoch)
            report.losses.append(float(loss.detach()))
            report.progress.append(progress)
            report.seconds.append(time.perf_counter() - start)
            if config.log_every and epoch % config.log_every == 0:
                log.info("epoch %d loss %.3e progress %.3f", epoch, report.losses[-1], progress)
            if (
                checkpoint_dir is not None
                and save is not None
                and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0
            ):
                path = Path(checkpoint_dir) / f"epoch_{epoch + 1:07d}.ckpt"
                save(path, net)
                report.checkpoints.append(str(path))
    finally:
        for t in tensors:
            t.requires_grad_(False)
    if config.pretrain_epochs >= config.epochs:
        report.pretrain_loss_end = eval_boundary_loss()
    return net, report


def learned_policy(net: ValueNet, gamma: float) -> Callable:
    """``u(x, t) = argmax_u dV/dx . f(x, u)`` with ``tau = clip(t_f - t, 0, t_f)``."""

    def policy(x, t):
        x = np.asarray(x, dtype=np.float64)
        tau = min(max(net.t_f - float(t), 0.0), net.t_f)
        _, grad = net.value_and_gradient(x, tau, gamma)
        return net.system.optimal_control(x, grad)

    return policy
