"""Sine-activated value network with an exact terminal condition.

The learned value is

    V(x, tau, gamma) = l(x) + tau * NN(normalize(x, tau, gamma))

so at ``tau = 0`` it equals the boundary function exactly. Input gradients
are computed by an explicit chain-rule sweep through the sine layers rather
than by autograd; parameter gradients of losses that involve those input
gradients come from torch reverse mode over that sweep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .dynamics import SystemModel

__all__ = ["MLPParams", "ValueNet", "init_params", "loss_gradient"]

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class MLPParams:
    """Weights ``(out, in)`` and biases for ``in_dim -> hidden^L -> 1``."""

    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    omega0: float = 30.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ValueError("need at least one sine layer and an output layer")
        prev = self.weights[0].shape[1]
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != prev or b.shape != (W.shape[0],):
                raise ValueError("inconsistent layer shapes")
            prev = W.shape[0]
        if prev != 1:
            raise ValueError("output layer must have width 1")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def hidden_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.weights[0].dtype

    def tensors(self) -> list[torch.Tensor]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def clone(self) -> "MLPParams":
        return MLPParams(
            [W.detach().clone() for W in self.weights],
            [b.detach().clone() for b in self.biases],
            self.omega0,
        )


def init_params(
    seed: int,
    in_dim: int,
    hidden_layers: int = 3,
    hidden_size: int = 128,
    omega0: float = 30.0,
    dtype: str | torch.dtype = "float64",
) -> MLPParams:
    """SIREN initialisation, drawn from a numpy generator so it is seed-stable."""
    dtype = _DTYPES[dtype] if isinstance(dtype, str) else dtype
    rng = np.random.default_rng(seed)
    sizes = [in_dim] + [hidden_size] * hidden_layers + [1]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / fan_in if k == 0 else math.sqrt(6.0 / fan_in) / omega0
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(torch.tensor(W, dtype=dtype))
        biases.append(torch.zeros(fan_out, dtype=dtype))
    return MLPParams(weights, biases, float(omega0))


def _to_tensor(a, dtype=torch.float64) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(dtype)
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)


def _broadcast(v, n: int) -> torch.Tensor:
    v = _to_tensor(v).reshape(-1)
    return v.expand(n) if v.numel() == 1 else v.reshape(n)


class ValueNet:
    """Value function ``V(x, tau, gamma)`` backed by a sine MLP.

    ``tau`` is time-to-go, ``t_f - t``. State inputs are mapped to
    ``[-1, 1]`` with ``state_lower``/``state_upper``; ``tau`` and ``gamma`` are
    mapped to ``[0, 1]``.
    """

    def __init__(
        self,
        params: MLPParams,
        system: SystemModel,
        t_f: float = 1.0,
        gamma_range: Sequence[float] = (0.0, 1.0),
        state_lower: Sequence[float] | None = None,
        state_upper: Sequence[float] | None = None,
    ):
        if params.in_dim != system.state_dim + 2:
            raise ValueError(
                f"network input width {params.in_dim} != state_dim + 2 = {system.state_dim + 2}"
            )
        self.params = params
        self.system = system
        self.t_f = float(t_f)
        self.gamma_range = (float(gamma_range[0]), float(gamma_range[1]))
        if self.gamma_range[0] > self.gamma_range[1]:
            raise ValueError("gamma_range is reversed")
        lo = system.domain_lower if state_lower is None else np.asarray(state_lower, float)
        hi = system.domain_upper if state_upper is None else np.asarray(state_upper, float)
        self.state_lower = np.asarray(lo, dtype=np.float64)
        self.state_upper = np.asarray(hi, dtype=np.float64)

    @classmethod
    def create(cls, system: SystemModel, seed: int = 0, hidden_layers: int = 3,
               hidden_size: int = 128, omega0: float = 30.0, dtype="float64", **kw) -> "ValueNet":
        params = init_params(seed, system.state_dim + 2, hidden_layers, hidden_size, omega0, dtype)
        return cls(params, system, **kw)

    @property
    def dtype(self) -> torch.dtype:
        return self.params.dtype

    # -- normalisation --------------------------------------------------
    def _input_scales(self) -> torch.Tensor:
        g0, g1 = self.gamma_range
        sx = 2.0 / (self.state_upper - self.state_lower)
        sg = 1.0 / (g1 - g0) if g1 > g0 else 0.0
        return torch.tensor(np.concatenate([sx, [1.0 / self.t_f, sg]]), dtype=torch.float64)

    def _normalize(self, x: torch.Tensor, tau: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.state_lower, dtype=torch.float64)
        hi = torch.as_tensor(self.state_upper, dtype=torch.float64)
        xn = 2.0 * (x - lo) / (hi - lo) - 1.0
        g0, g1 = self.gamma_range
        gn = (gamma - g0) / (g1 - g0) if g1 > g0 else 0.0 * gamma
        a = torch.cat([xn, (tau / self.t_f)[:, None], gn[:, None]], dim=1)
        return a.to(self.dtype)

    def _check_args(self, tau: torch.Tensor, gamma: torch.Tensor):
        tol = 1e-9
        if torch.any(tau < -tol) or torch.any(tau > self.t_f + tol):
            raise ValueError(f"tau must lie in [0, {self.t_f}]")
        g0, g1 = self.gamma_range
        if torch.any(gamma < g0 - tol) or torch.any(gamma > g1 + tol):
            raise ValueError(f"gamma must lie in [{g0}, {g1}]")

    def _prepare(self, x, tau, gamma):
        x = _to_tensor(x)
        single = x.ndim == 1
        x = x.reshape(-1, self.system.state_dim)
        n = x.shape[0]
        tau = _broadcast(tau, n)
        gamma = _broadcast(gamma, n)
        self._check_args(tau, gamma)
        return x, tau, gamma, single

    # -- core evaluation ------------------------------------------------
    def nn(self, a: torch.Tensor, with_grad: bool = False):
        """Raw MLP on normalised inputs; optionally the analytic input gradient."""
        p = self.params
        w0 = p.omega0
        h = a
        pre = []
        for W, b in zip(p.weights[:-1], p.biases[:-1]):
            z = w0 * (h @ W.T + b)
            pre.append(z)
            h = torch.sin(z)
        y = (h @ p.weights[-1].T + p.biases[-1])[:, 0]
        if not with_grad:
            return y, None
        g = p.weights[-1].expand(a.shape[0], -1)
        for W, z in zip(reversed(p.weights[:-1]), reversed(pre)):
            g = (g * (w0 * torch.cos(z))) @ W
        return y, g

    def evaluate(self, x, tau, gamma, need_grad: bool = True):
        """Return ``(V, dV/dx, dV/dtau, dV/dgamma)`` as float64 tensors.

        Gradients are ``None`` when ``need_grad`` is false. The result stays on
        the autograd graph of the parameters.
        """
        x, tau, gamma, _ = self._prepare(x, tau, gamma)
        return self._evaluate(x, tau, gamma, need_grad)

    def _evaluate(self, x, tau, gamma, need_grad):
        a = self._normalize(x, tau, gamma)
        y, g = self.nn(a, with_grad=need_grad)
        y = y.to(torch.float64)
        l = self.system.boundary(x)
        V = l + tau * y
        if not need_grad:
            return V, None, None, None
        g = g.to(torch.float64) * self._input_scales()
        n = self.system.state_dim
        dVdx = self.system.boundary_gradient(x) + tau[:, None] * g[:, :n]
        dVdtau = y + tau * g[:, n]
        dVdgamma = tau * g[:, n + 1]
        return V, dVdx, dVdtau, dVdgamma

    # -- numpy-facing helpers -------------------------------------------
    def forward(self, x, tau, gamma):
        """Value at ``(x, tau, gamma)``; numpy in, numpy out."""
        x_, tau_, gamma_, single = self._prepare(x, tau, gamma)
        with torch.no_grad():
            V, *_ = self._evaluate(x_, tau_, gamma_, need_grad=False)
        V = V.numpy()
        return float(V[0]) if single else V

    def input_gradient(self, x, tau, gamma):
        """``(dV/dx, dV/dtau, dV/dgamma)`` as numpy arrays."""
        x_, tau_, gamma_, single = self._prepare(x, tau, gamma)
        with torch.no_grad():
            _, gx, gt, gg = self._evaluate(x_, tau_, gamma_, need_grad=True)
        gx, gt, gg = gx.numpy(), gt.numpy(), gg.numpy()
        if single:
            return gx[0], float(gt[0]), float(gg[0])
        return gx, gt, gg

    def value_and_gradient(self, x, tau, gamma):
        x_, tau_, gamma_, single = self._prepare(x, tau, gamma)
        with torch.no_grad():
            V, gx, _, _ = self._evaluate(x_, tau_, gamma_, need_grad=True)
        V, gx = V.numpy(), gx.numpy()
        if single:
            return float(V[0]), gx[0]
        return V, gx

    def copy(self) -> "ValueNet":
        return ValueNet(
            self.params.clone(), self.system, self.t_f, self.gamma_range,
            self.state_lower, self.state_upper,
        )

    def metadata(self) -> dict:
        return {
            "system": self.system.config(),
            "t_f": self.t_f,
            "gamma_range": list(self.gamma_range),
            "state_lower": self.state_lower.tolist(),
            "state_upper": self.state_upper.tolist(),
            "hidden_layers": self.params.hidden_layers,
            "hidden_size": self.params.hidden_size,
            "omega0": self.params.omega0,
            "in_dim": self.params.in_dim,
            "dtype": str(self.dtype).replace("torch.", ""),
        }


def loss_gradient(
    net: ValueNet,
    batch: tuple,
    loss_fn: Callable[..., torch.Tensor],
) -> tuple[float, list[torch.Tensor]]:
    """Loss value and its gradient w.r.t. every parameter tensor.

    ``batch`` is ``(x, tau, gamma)``; ``loss_fn(V, dVdx, dVdtau, x, tau, gamma)``
    must return a scalar tensor. Gradients are ordered as
    ``MLPParams.tensors()``.
    """
    tensors = net.params.tensors()
    for t in tensors:
        t.requires_grad_(True)
    try:
        x, tau, gamma, _ = net._prepare(*batch)
        V, dVdx, dVdtau, _ = net._evaluate(x, tau, gamma, need_grad=True)
        loss = loss_fn(V, dVdx, dVdtau, x, tau, gamma)
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    finally:
        for t in tensors:
            t.requires_grad_(False)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    return float(loss.detach()), grads
