import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rbn.dynamics import Dubins3D, Integrator1D, MultiVehicle9D
from rbn.network import ValueNet, init_params, loss_gradient
from rbn.training import residual


def numpy_siren(net, a):
    """Independent forward and input backprop in plain numpy."""
    Ws = [W.double().numpy() for W in net.params.weights]
    bs = [b.double().numpy() for b in net.params.biases]
    w0 = net.params.omega0
    h, zs = a, []
    for W, b in zip(Ws[:-1], bs[:-1]):
        z = w0 * (h @ W.T + b)
        zs.append(z)
        h = np.sin(z)
    y = (h @ Ws[-1].T + bs[-1])[:, 0]
    g = np.repeat(Ws[-1], len(a), axis=0)
    for W, z in zip(reversed(Ws[:-1]), reversed(zs)):
        g = (g * w0 * np.cos(z)) @ W
    return y, g


def smooth_points(system, n, rng):
    x = system.sample_states(4 * n, rng)
    return x[np.abs(system.boundary(x)) > 0.05][:n]


def test_nn_matches_numpy_oracle():
    net = ValueNet.create(Dubins3D(), seed=3, hidden_size=32)
    rng = np.random.default_rng(0)
    a = rng.uniform(-1, 1, size=(20, 5))
    y, g = net.nn(torch.tensor(a), with_grad=True)
    y_ref, g_ref = numpy_siren(net, a)
    np.testing.assert_allclose(y.numpy(), y_ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(g.numpy(), g_ref, rtol=1e-10, atol=1e-12)


def test_input_gradient_matches_central_differences():
    system = Dubins3D()
    net = ValueNet.create(system, seed=1, hidden_size=64)
    rng = np.random.default_rng(1)
    x = smooth_points(system, 100, rng)
    tau = rng.uniform(0.05, 0.95, 100)
    gamma = rng.uniform(0.05, 0.95, 100)
    gx, gt, gg = net.input_gradient(x, tau, gamma)
    h = 1e-5
    analytic = np.column_stack([gx, gt, gg])
    fd = np.empty_like(analytic)
    for d in range(5):
        def shifted(s):
            xx, tt, ggm = x.copy(), tau.copy(), gamma.copy()
            if d < 3:
                xx[:, d] += s
            elif d == 3:
                tt += s
            else:
                ggm += s
            return net.forward(xx, tt, ggm)
        fd[:, d] = (shifted(h) - shifted(-h)) / (2 * h)
    rel = np.linalg.norm(analytic - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-12)
    assert rel.max() < 1e-6


def test_residual_loss_parameter_gradient_matches_finite_differences():
    system = Dubins3D()
    net = ValueNet.create(system, seed=2, hidden_size=4)
    rng = np.random.default_rng(2)
    x = smooth_points(system, 64, rng)
    batch = (x, rng.uniform(0, 1, len(x)), rng.uniform(0, 1, len(x)))

    def loss_fn(V, dVdx, dVdtau, x, tau, gamma):
        return residual(net, V, dVdx, dVdtau, x, tau, gamma).abs().mean()

    def loss_at(params):
        return loss_gradient(params, batch, loss_fn)[0]

    _, grads = loss_gradient(net, batch, loss_fn)
    h = 1e-6
    tensors = net.params.tensors()
    checked = 0
    for t, g in zip(tensors, grads):
        flat = t.view(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = loss_at(net)
            flat[i] = orig - h
            down = loss_at(net)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            if abs(fd) < 1e-8 and abs(float(gflat[i])) < 1e-8:
                continue
            assert abs(fd - float(gflat[i])) / max(abs(fd), abs(float(gflat[i]))) < 1e-3
            checked += 1
    assert checked > 20


def test_square_loss_gradient_matches_numpy_backprop():
    # oracle: hand-written first-order backprop of mean V^2 through l + tau * NN
    system = Integrator1D()
    net = ValueNet.create(system, seed=4, hidden_layers=2, hidden_size=6)
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (16, 1))
    tau = rng.uniform(0, 1, 16)
    gamma = rng.uniform(0, 1, 16)
    _, grads = loss_gradient(net, (x, tau, gamma), lambda V, *_: (V**2).mean())

    a = np.column_stack([x[:, 0] / 2.0, tau, gamma])
    Ws = [W.numpy() for W in net.params.weights]
    bs = [b.numpy() for b in net.params.biases]
    w0 = net.params.omega0
    hs, zs = [a], []
    for W, b in zip(Ws[:-1], bs[:-1]):
        zs.append(w0 * (hs[-1] @ W.T + b))
        hs.append(np.sin(zs[-1]))
    y = (hs[-1] @ Ws[-1].T + bs[-1])[:, 0]
    V = x[:, 0] + tau * y
    dy = (2 * V / len(V) * tau)[:, None]
    ref = [None] * (2 * len(Ws))
    ref[-2] = dy.T @ hs[-1]
    ref[-1] = dy.sum(0)
    delta = dy @ Ws[-1]
    for k in range(len(Ws) - 2, -1, -1):
        dz = delta * np.cos(zs[k]) * w0
        ref[2 * k] = dz.T @ hs[k]
        ref[2 * k + 1] = dz.sum(0)
        delta = dz @ Ws[k]
    for g, r in zip(grads, ref):
        np.testing.assert_allclose(g.numpy(), r, rtol=1e-9, atol=1e-12)


def test_siren_initialisation_bounds_and_scale():
    p = init_params(0, in_dim=5, hidden_layers=3, hidden_size=128, omega0=30)
    assert torch.all(p.weights[0].abs() <= 1 / 5)
    for W in p.weights[1:]:
        assert torch.all(W.abs() <= math.sqrt(6 / W.shape[1]) / 30)
    assert all(torch.all(b == 0) for b in p.biases)
    # hidden pre-activations have unit spread: 30^2 * fan_in * (2 / (fan_in 30^2)) * E[sin^2]
    a = torch.tensor(np.random.default_rng(0).uniform(-1, 1, (4000, 5)))
    h = torch.sin(30 * (a @ p.weights[0].T))
    for W in p.weights[1:-1]:
        z = 30 * (h @ W.T)
        assert 0.85 < float(z.std()) < 1.15
        h = torch.sin(z)


def test_initialisation_is_seed_stable():
    a = init_params(7, 3, 2, 8)
    b = init_params(7, 3, 2, 8)
    c = init_params(8, 3, 2, 8)
    assert all(torch.equal(x, y) for x, y in zip(a.tensors(), b.tensors()))
    assert not torch.equal(a.weights[0], c.weights[0])


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-3, 3), st.floats(0, 1))
def test_value_equals_boundary_at_zero_time_to_go(x, y, th, gamma):
    system = Dubins3D()
    net = ValueNet.create(system, seed=0, hidden_size=16)
    s = np.array([x, y, th])
    assert net.forward(s, 0.0, gamma) == pytest.approx(float(system.boundary(s)), abs=1e-12)


def test_out_of_range_arguments_rejected():
    net = ValueNet.create(Dubins3D(), hidden_size=8)
    with pytest.raises(ValueError, match="tau"):
        net.forward(np.zeros(3), 1.5, 0.0)
    with pytest.raises(ValueError, match="gamma"):
        net.forward(np.zeros(3), 0.5, -0.2)
    with pytest.raises(ValueError, match="input width"):
        ValueNet(init_params(0, 4, 1, 4), Dubins3D())


def test_float32_network_returns_float64_outputs():
    net = ValueNet.create(MultiVehicle9D(), hidden_size=16, dtype="float32")
    rng = np.random.default_rng(0)
    x = net.system.sample_states(5, rng)
    V, g = net.value_and_gradient(x, 0.5, 0.1)
    assert V.dtype == np.float64 and g.shape == (5, 9)
    single = net.forward(x[0], 0.5, 0.1)
    assert isinstance(single, float) and single == pytest.approx(V[0])


def test_copy_is_independent():
    net = ValueNet.create(Dubins3D(), hidden_size=8)
    other = net.copy()
    other.params.weights[0].add_(1.0)
    assert not torch.equal(net.params.weights[0], other.params.weights[0])
