import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pushgrasp import gradcore as gc
from pushgrasp.gradcore import Tensor

from oracles import central_difference, direct_conv2d, rel_error


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def check_grad(build, *arrays, tol=1e-4):
    """Compare autodiff against central differences for every input array."""
    tensors = [leaf(a) for a in arrays]
    loss = build(*tensors)
    gc.backward(loss)
    for t in tensors:
        def f():
            return build(*[Tensor(s.data) for s in tensors]).item()
        num = central_difference(f, t.data)
        assert rel_error(t.grad, num) < tol, (build, t.shape)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 2))
    np.testing.assert_array_equal(gc.matmul(np.eye(2), a).data, a)


def test_relu_definition():
    np.testing.assert_array_equal(gc.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])


def test_conv2d_ones():
    x = np.ones((1, 1, 4, 4))
    w = np.ones((1, 1, 3, 3))
    out = gc.conv2d(x, w, np.zeros(1), stride=1).data[0, 0]
    assert out[1:3, 1:3].tolist() == [[9, 9], [9, 9]]
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4
    assert out[0, 1] == 6


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [(5, 5), (6, 4), (9, 8), (8, 11)])
def test_conv2d_matches_direct_loop(stride, size):
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (2, 3) + size)
    w = rng.uniform(-2, 2, (4, 3, 3, 3))
    b = rng.uniform(-2, 2, 4)
    np.testing.assert_allclose(gc.conv2d(x, w, b, stride).data, direct_conv2d(x, w, b, stride), atol=1e-12)


def test_shape_errors_name_the_op():
    with pytest.raises(gc.ShapeError, match="matmul"):
        gc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(gc.ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        gc.add(np.ones((2, 3)), np.ones(4))
    with pytest.raises(gc.ShapeError, match="conv2d"):
        gc.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(gc.ShapeError):
        gc.backward(gc.relu(x))


def test_sum_gradient_is_ones():
    x = leaf(np.random.default_rng(1).normal(size=(3, 4)))
    gc.backward(gc.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_mse_gradient_convention():
    x = leaf([3.0])
    gc.backward(gc.mse(x, np.zeros(1)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_graph_visits_each_node_once():
    x = leaf([1.0, 2.0])
    y = gc.mul(x, x)
    z = gc.sum(gc.add(y, y))
    graph = gc.Graph.trace(z)
    assert len({id(n) for n in graph.nodes}) == len(graph.nodes)
    gc.backward(z)
    np.testing.assert_allclose(x.grad, 4 * x.data)


RNG = np.random.default_rng(42)


def _u(*shape):
    return RNG.uniform(-2, 2, shape)


def _pos(*shape):
    return RNG.uniform(0.2, 2, shape)


OP_CASES = {
    "matmul": (lambda a, b: gc.sum(gc.matmul(a, b)), (_u(3, 4), _u(4, 2))),
    "add_row": (lambda a, b: gc.sum(gc.square(gc.add(a, b))), (_u(3, 4), _u(4))),
    "mul": (lambda a, b: gc.sum(gc.mul(a, b)), (_u(3, 4), _u(3, 4))),
    "mul_row": (lambda a, b: gc.sum(gc.square(gc.mul(a, b))), (_u(3, 4), _u(4))),
    "sub": (lambda a, b: gc.sum(gc.square(gc.sub(a, b))), (_u(5), _u(5))),
    "relu": (lambda a: gc.sum(gc.square(gc.relu(a))), (_u(4, 3),)),
    "tanh": (lambda a: gc.sum(gc.tanh(a)), (_u(4, 3),)),
    "sigmoid": (lambda a: gc.sum(gc.square(gc.sigmoid(a))), (_u(4, 3),)),
    "exp": (lambda a: gc.sum(gc.exp(a)), (_u(6),)),
    "log": (lambda a: gc.sum(gc.log(a)), (_pos(6),)),
    "mean": (lambda a: gc.mean(gc.square(a)), (_u(3, 3),)),
    "sum_last": (lambda a: gc.sum(gc.square(gc.sum(a, axis=-1))), (_u(3, 4),)),
    "mse": (lambda a, b: gc.mse(a, b), (_u(2, 5), _u(2, 5))),
    "clamp": (lambda a: gc.sum(gc.square(gc.clamp(a, -1.0, 1.0))), (_u(10),)),
    "minimum": (lambda a, b: gc.sum(gc.minimum(a, b)), (_u(8), _u(8))),
    "reshape": (lambda a: gc.sum(gc.square(gc.reshape(a, (6, 2)))), (_u(3, 4),)),
    "columns": (lambda a: gc.sum(gc.square(gc.columns(a, 1, 3))), (_u(3, 4),)),
    "upsample": (lambda a: gc.sum(gc.square(gc.upsample2x(a))), (_u(1, 2, 3, 3),)),
    "conv_s1": (lambda x, w, b: gc.sum(gc.square(gc.conv2d(x, w, b, 1))),
                (_u(2, 2, 5, 5), _u(3, 2, 3, 3), _u(3))),
    "conv_s1_large": (lambda x, w, b: gc.sum(gc.square(gc.conv2d(x, w, b, 1))),
                      (_u(2, 3, 8, 9), _u(2, 3, 3, 3), _u(2))),
    "conv_s1_wide": (lambda x, w, b: gc.sum(gc.square(gc.conv2d(x, w, b, 1))),
                     (_u(1, 2, 8, 8), _u(4, 2, 3, 3), _u(4))),
    "conv_s2": (lambda x, w, b: gc.sum(gc.square(gc.conv2d(x, w, b, 2))),
                (_u(1, 2, 6, 6), _u(2, 2, 3, 3), _u(2))),
    "logprob": (lambda x, m, s: gc.sum(gc.gaussian_logprob(x, m, s)), (_u(3, 2), _u(3, 2), _u(2))),
    "kl": (lambda m, s: gc.kl_diag_gaussian(m, s), (_u(4), _u(4))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_difference(name):
    build, arrays = OP_CASES[name]
    check_grad(build, *[a.copy() for a in arrays])


def test_three_layer_network_gradient():
    rng = np.random.default_rng(7)
    x = rng.uniform(-2, 2, (5, 4))
    params = [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 5)),
              rng.normal(size=5), rng.normal(size=(5, 1)), rng.normal(size=1)]

    def build(w1, b1, w2, b2, w3, b3):
        h = gc.tanh(gc.linear(x, w1, b1))
        h = gc.relu(gc.linear(h, w2, b2))
        return gc.mse(gc.linear(h, w3, b3), np.ones((5, 1)))

    check_grad(build, *params)


def test_zero_loss_graph_has_zero_gradients():
    w = leaf(np.random.default_rng(2).normal(size=(3, 3)))
    loss = gc.mul(gc.sum(gc.tanh(w)), 0.0)
    gc.backward(loss)
    np.testing.assert_array_equal(w.grad, np.zeros((3, 3)))


def test_gaussian_logprob_values():
    assert gc.gaussian_logprob([0.0], [0.0], [0.0]).item() == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert gc.gaussian_logprob([1.0], [0.0], [0.0]).item() == pytest.approx(-1.4189385, abs=1e-7)


def test_gaussian_logprob_mean_gradient():
    mu = leaf([0.0])
    log_std = np.array([math.log(2.0)])
    gc.backward(gc.sum(gc.gaussian_logprob([2.0], mu, log_std)))
    probe = mu.data.copy()
    num = central_difference(lambda: gc.gaussian_logprob([2.0], probe, log_std).item(), probe)
    assert num[0] == pytest.approx(0.5, abs=1e-8)
    assert mu.grad[0] == pytest.approx(num[0], rel=1e-6)


def test_kl_closed_form_values():
    assert gc.kl_diag_gaussian(np.zeros(5), np.zeros(5)).item() == 0.0
    assert gc.kl_diag_gaussian([1.0], [0.0]).item() == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    mu = np.array([0.3, -0.2])
    sigma = np.array([0.5, 2.0])
    rng = np.random.default_rng(11)
    z = mu + sigma * rng.standard_normal((1_000_000, 2))
    log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * z ** 2 - 0.5 * math.log(2 * math.pi)
    mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
    assert gc.kl_diag_gaussian(mu, np.log(sigma)).item() == pytest.approx(mc, abs=1e-2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-4, 4)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mu = np.array([p[0] for p in pairs])
    log_std = np.array([p[1] for p in pairs])
    kl = gc.kl_diag_gaussian(mu, log_std).item()
    assert kl >= -1e-12
    if np.all(mu == 0) and np.all(log_std == 0):
        assert kl == 0.0


def test_adam_zero_gradient_fixed_point():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]))}
    state = gc.AdamState(learning_rate=0.1)
    for _ in range(50):
        gc.adam_step(state, p, {"w": np.zeros(3)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0, 3.0])
    assert state.step_count == 50


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-5, 1.0), st.floats(0.0, 0.999), st.floats(0.0, 0.9999))
def test_adam_zero_gradient_identity_any_counter(steps, lr, b1, b2):
    p = {"w": Tensor(np.array([0.5, -0.25]))}
    state = gc.AdamState(learning_rate=lr, beta1=b1, beta2=b2, step_count=steps,
                         second_moment={"w": np.array([0.3, 4.0])}, first_moment={"w": np.zeros(2)})
    gc.adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [0.5, -0.25])
    assert state.step_count == steps + 1


def test_adam_first_step_is_unit_step():
    # m = 0.1, v = 0.001, corrected both to 1, so the step is lr * 1 / (1 + eps)
    p = {"w": Tensor(np.array([0.0]))}
    gc.adam_step(gc.AdamState(learning_rate=0.1), p, {"w": np.array([1.0])})
    assert p["w"].data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_quadratic_bowl():
    w = Tensor(np.array([1.0]), requires_grad=True)
    state = gc.AdamState(learning_rate=0.005)
    for step in range(2000):
        w.grad = None
        gc.backward(gc.sum(gc.square(w)))
        gc.adam_step(state, {"w": w})
        if abs(w.data[0]) < 0.1:
            break
    assert abs(w.data[0]) < 0.1


def test_adam_missing_gradient_named():
    with pytest.raises(ValueError, match="bias"):
        gc.adam_step(gc.AdamState(), {"bias": Tensor(np.zeros(2))}, {})


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert gc.clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
