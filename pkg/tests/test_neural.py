import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaycert.neural import (GradientBuffer, Mlp, backward, forward, forward_cache, init_mlp, input_gradient,
                              lipschitz_upper, mlp_from_dict, mlp_to_dict, norm_net, recenter, scaled,
                              sgd_step, spectral_norm)


def linear(w, b):
    return Mlp((np.array(w, dtype=float),), (np.array(b, dtype=float),))


def test_zero_network_outputs_zero():
    net = Mlp((np.zeros((4, 3)), np.zeros((1, 4))), (np.zeros(4), np.zeros(1)))
    assert np.all(forward(net, np.ones((5, 3))) == 0.0)


def test_single_linear_layer():
    assert forward(linear([[2.0]], [1.0]), np.array([3.0])).tolist() == [7.0]


def test_relu_layer():
    net = Mlp((np.eye(2), np.eye(2)), (np.zeros(2), np.zeros(2)))
    _, acts = forward_cache(net, np.array([[-1.0, 2.0]]))
    assert acts[1].tolist() == [[0.0, 2.0]]


def test_shapes_must_chain():
    with pytest.raises(ValueError):
        Mlp((np.zeros((4, 3)), np.zeros((1, 5))), (np.zeros(4), np.zeros(1)))
    with pytest.raises(ValueError):
        forward(init_mlp(3, 1, (4,), 0), np.zeros((2, 2)))


def test_default_shape_three_hidden_layers():
    net = init_mlp(2, 1, rng=0)
    assert net.hidden == (64, 64, 64)
    assert all(not np.any(b) for b in net.biases)


def test_backward_examples():
    net = linear([[5.0]], [0.0])
    _, cache = forward_cache(net, np.array([[3.0]]))
    g, dx = backward(net, cache, np.array([[1.0]]))
    assert g.weights[0].tolist() == [[3.0]]
    assert g.biases[0].tolist() == [1.0]
    assert dx.tolist() == [[5.0]]
    g0, _ = backward(net, cache, np.array([[0.0]]))
    assert g0.is_zero()


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = init_mlp(3, 2, (6,), rng)
    net = Mlp(net.weights, tuple(b + rng.normal(0, 0.1, b.shape) for b in net.biases))
    x = rng.normal(size=(7, 3))
    up = rng.normal(size=(7, 2))
    _, cache = forward_cache(net, x)
    g, _ = backward(net, cache, up)
    h = 1e-5
    worst = 0.0
    for l, w in enumerate(net.weights):
        for idx in np.ndindex(w.shape):
            vals = []
            for s in (1, -1):
                ws = [a.copy() for a in net.weights]
                ws[l][idx] += s * h
                vals.append(float(np.sum(forward(Mlp(tuple(ws), net.biases), x) * up)))
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(fd - g.weights[l][idx]) / max(abs(fd), 1e-6))
    assert worst < 1e-4


def test_input_gradient_of_norm_net():
    net = norm_net(2, 3.0)
    dx = input_gradient(net, np.array([[1.0, -2.0]]))
    assert dx.tolist() == [[3.0, -3.0]]


def test_lipschitz_examples():
    assert lipschitz_upper(linear([[2.0]], [0.0])).value <= 2.0 * 1.01
    assert lipschitz_upper(linear([[2.0]], [0.0])).value >= 2.0
    net = Mlp((np.diag([2.0, 2.0]), np.diag([3.0, 3.0])), (np.zeros(2), np.zeros(2)))
    val = lipschitz_upper(net).value
    assert 6.0 <= val <= 6.0 * 1.01 ** 2
    zero = Mlp((np.zeros((3, 2)), np.zeros((1, 3))), (np.zeros(3), np.zeros(1)))
    assert lipschitz_upper(zero).value == 0.0
    with pytest.raises(ValueError):
        lipschitz_upper(net, method="guess")


def test_spectral_norm_power_iteration():
    w = np.random.default_rng(1).normal(size=(5, 4))
    assert spectral_norm(w) == pytest.approx(np.linalg.norm(w, 2), rel=1e-6)
    assert spectral_norm(np.zeros((2, 2))) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.lists(st.integers(1, 6), min_size=0, max_size=3))
def test_lipschitz_bounds_dominate_secants(seed, dim, hidden):
    rng = np.random.default_rng(seed)
    net = init_mlp(dim, 1, tuple(hidden), rng)
    net = Mlp(net.weights, tuple(b + rng.normal(0, 0.5, b.shape) for b in net.biases))
    loose = lipschitz_upper(net, method="norm-product").value
    tight = lipschitz_upper(net, method="tight").value
    assert tight <= loose
    x = rng.normal(0, 2, (400, dim))
    y = x + rng.normal(0, rng.uniform(1e-3, 1.0), (400, dim))
    ratio = np.abs(forward(net, x) - forward(net, y))[:, 0] / np.linalg.norm(x - y, axis=1)
    assert ratio.max() <= tight * (1 + 1e-9)


def test_sgd_step_examples():
    net = linear([[1.0]], [0.0])
    grads = GradientBuffer((np.array([[2.0]]),), (np.array([0.0]),))
    assert sgd_step(net, grads, 0.1).weights[0].tolist() == [[0.8]]
    same = sgd_step(net, GradientBuffer.zeros_like(net), 0.1)
    assert same.weights[0].tolist() == [[1.0]]
    g1 = GradientBuffer((np.array([[1.0]]),), (np.array([1.0]),))
    g2 = GradientBuffer((np.array([[3.0]]),), (np.array([-2.0]),))
    two = sgd_step(sgd_step(net, g1, 0.1), g2, 0.1)
    one = sgd_step(net, g1 + g2, 0.1)
    assert np.allclose(two.weights[0], one.weights[0])
    assert np.allclose(two.biases[0], one.biases[0])


def test_recenter_and_scaled():
    rng = np.random.default_rng(3)
    net = init_mlp(2, 1, (5,), rng)
    net = Mlp(net.weights, tuple(b + 0.3 for b in net.biases))
    r = recenter(net)
    assert abs(forward(r, np.zeros((1, 2)))[0, 0]) < 1e-15
    x = rng.normal(size=(4, 2))
    assert np.allclose(forward(scaled(net, 1.5), x), 1.5 * forward(net, x))


def test_norm_net_is_scaled_l1_norm():
    x = np.random.default_rng(4).normal(size=(10, 3))
    assert np.allclose(forward(norm_net(3, 2.0), x)[:, 0], 2.0 * np.abs(x).sum(axis=1))


def test_serialization_round_trip_is_exact():
    net = init_mlp(3, 2, (4, 4), 5)
    back = mlp_from_dict(mlp_to_dict(net))
    for a, b in zip(net.weights + net.biases, back.weights + back.biases):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        mlp_from_dict({"version": 2, "layers": []})
