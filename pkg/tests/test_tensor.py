import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import input_gradcheck, param_gradcheck
from portfolio_rl.errors import ShapeError, ValidationError
from portfolio_rl.tensor import (SGD, Activation, Adam, AdamState, Affine, Conv2D, Dropout, GRUCell,
                                 MaxPool2D, Module, Sequential, Softmax, Tape, Tensor, adam_step,
                                 forward_backward, l2_penalty, lgamma, load_parameters, mse_loss,
                                 no_grad, parameter_count, relu, save_parameters, sigmoid, softmax,
                                 tanh)
from portfolio_rl.tensor import core


class GruReadout(Module):
    def __init__(self, n_in, n_h, n_out, rng):
        super().__init__()
        self.gru = GRUCell(n_in, n_h, rng)
        self.out = Affine(n_h, n_out, rng)

    def forward(self, x):
        return self.out(self.gru(x)[-1])


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("seed", range(5))
def test_affine_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n_in, n_out, B = rng.integers(1, 6, size=3)
    layer = Affine(n_in, n_out, rng)
    x, y = Tensor(rng.normal(size=(B, n_in))), Tensor(rng.normal(size=(B, n_out)))
    assert param_gradcheck(layer, lambda: mse_loss(layer(x), y)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_conv_pool_gradcheck(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = rng.integers(1, 4, size=2)
    H, W = rng.integers(2, 7, size=2)
    net = Sequential(Conv2D(c_in, c_out, rng=rng), Activation(relu), MaxPool2D((2, 2)))
    x = Tensor(rng.normal(size=(2, c_in, H, W)))
    y = Tensor(rng.normal(size=(2, c_out, H // 2, W // 2)))
    assert param_gradcheck(net, lambda: mse_loss(net(x), y)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gru_bptt_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n_in, n_h = rng.integers(1, 5, size=2)
    steps = int(rng.integers(2, 11))
    net = GruReadout(n_in, n_h, 2, rng)
    x, y = Tensor(rng.normal(size=(3, steps, n_in))), Tensor(rng.normal(size=(3, 2)))
    assert param_gradcheck(net, lambda: mse_loss(net(x), y)) < 1e-3


@pytest.mark.parametrize("fn", [tanh, sigmoid, relu, lambda t: softmax(t, axis=-1),
                                lambda t: core.log_softmax(t, axis=-1), lambda t: lgamma(t * t + 0.5),
                                lambda t: core.exp(t), lambda t: core.log(t * t + 1.0),
                                lambda t: (t @ Tensor(np.ones((4, 2)))) / (t.sum() + 10.0)])
def test_elementwise_and_reduction_gradcheck(fn):
    x = np.random.default_rng(3).normal(size=(3, 4)) + 0.05  # keep relu away from its kink
    assert input_gradcheck(fn, x) < 1e-4


def test_l2_penalty_gradient():
    rng = np.random.default_rng(0)
    layer = Affine(3, 2, rng)
    assert param_gradcheck(layer, lambda: l2_penalty(layer.parameters())) < 1e-6


def test_identity_target_has_zero_loss_and_gradient():
    rng = np.random.default_rng(1)
    g = Affine(3, 3, rng)
    x = Tensor(rng.normal(size=(4, 3)))
    target = Tensor(g(x).data.copy())
    loss, grads = forward_backward(g, x, target)
    assert loss == 0.0
    assert all(np.all(v == 0) for v in grads.values())


def test_shape_error_names_layer():
    layer = Affine(3, 2, np.random.default_rng(0), name="head")
    with pytest.raises(ShapeError) as info:
        layer(Tensor(np.zeros((1, 4))))
    assert info.value.layer == "head"


# ---------------------------------------------------------------- tape

def test_tape_visits_each_node_once_on_shared_subgraph():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    z = y + y * 3.0 + y  # y reused three times
    tape = Tape.record(z.sum())
    n = len(tape.nodes)
    tape.backward()
    assert tape.visits == n
    assert x.grad[0] == pytest.approx(5 * 2 * 1.5)
    assert tape.nodes == []  # closures freed


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        x = Tensor(np.ones(2), requires_grad=True)
        seen["requires"] = (x * 2.0).requires_grad

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        inside = (Tensor(np.ones(2), requires_grad=True) * 2.0).requires_grad
    assert seen["requires"] and not inside


# ---------------------------------------------------------------- counts and shapes

def test_parameter_count_anchors():
    rng = np.random.default_rng(0)
    assert parameter_count(GRUCell(4, 3, rng), Affine(3, 4, rng)) == 88
    assert Affine(3, 4, rng).parameter_count() == 16


@given(st.integers(1, 4), st.integers(1, 12), st.integers(1, 12))
def test_gru_parameter_formula(n_in, n_h, _):
    assert GRUCell(n_in, n_h, 0).parameter_count() == 3 * (n_h * n_in + n_h * n_h + n_h)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3, 5]),
       st.integers(1, 3), st.integers(0, 2))
def test_conv_output_shape_arithmetic(c, H, W, k, stride, pad):
    if H + 2 * pad < k or W + 2 * pad < k:
        return
    conv = Conv2D(c, 2, (k, k), stride=stride, padding=pad, rng=0)
    out = conv(Tensor(np.zeros((1, c, H, W))))
    assert out.shape[2:] == conv.output_shape(H, W)
    assert out.shape[2:] == ((H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1)


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    assert np.allclose(softmax(Tensor(np.zeros(5))).data, 0.2)
    assert np.allclose(softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75], atol=1e-15)


@given(arrays(float, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_valid_and_shift_invariant(z, c):
    p = softmax(Tensor(z)).data
    assert np.all(p > 0) or np.ptp(z) > 30
    assert abs(p.sum() - 1) <= 1e-12
    assert np.max(np.abs(softmax(Tensor(z + c)).data - p)) <= 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(ValidationError):
        softmax(Tensor(np.array([0.0, np.nan])))


# ---------------------------------------------------------------- optimizers

def test_adam_zero_gradient_and_first_step():
    p = [np.array([1.0, -2.0])]
    new, state = adam_step(p, [np.zeros(2)], AdamState(), lr=0.1)
    assert np.array_equal(new[0], p[0])
    new, state = adam_step(p, [np.array([0.3, -4.0])], AdamState(), lr=0.1)
    assert np.allclose(new[0] - p[0], [-0.1, 0.1], atol=1e-6)
    new2, state2 = adam_step(new, [np.zeros(2)], state, lr=0.1)
    assert np.all(np.abs(state2.m[0]) < np.abs(state.m[0]))


@pytest.mark.parametrize("opt_cls", [SGD, Adam])
def test_zero_learning_rate_is_identity(opt_cls):
    layer = Affine(3, 2, np.random.default_rng(0))
    before = layer.state_dict()
    opt = opt_cls(layer.parameters(), lr=0.0)
    mse_loss(layer(Tensor(np.ones((2, 3)))), Tensor(np.zeros((2, 2)))).backward()
    opt.step()
    assert all(np.array_equal(before[k], v) for k, v in layer.state_dict().items())


def test_optimizer_determinism():
    def run():
        rng = np.random.default_rng(4)
        layer = Affine(3, 2, rng)
        opt = Adam(layer.parameters(), lr=0.05)
        x, y = Tensor(rng.normal(size=(8, 3))), Tensor(rng.normal(size=(8, 2)))
        for _ in range(20):
            opt.zero_grad()
            mse_loss(layer(x), y).backward()
            opt.step()
        return layer.state_dict()
    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_frozen_parameters_do_not_move():
    rng = np.random.default_rng(0)
    net = GruReadout(2, 3, 2, rng)
    net.gru.freeze()
    before = net.gru.state_dict()
    opt = Adam(net.parameters(), lr=0.1)
    x, y = Tensor(rng.normal(size=(2, 4, 2))), Tensor(rng.normal(size=(2, 2)))
    for _ in range(3):
        opt.zero_grad()
        mse_loss(net(x), y).backward()
        opt.step()
    assert all(np.array_equal(before[k], v) for k, v in net.gru.state_dict().items())
    assert net.parameter_count(trainable_only=True) == net.out.parameter_count()


# ---------------------------------------------------------------- dropout and checkpoints

def test_dropout_train_and_eval():
    d = Dropout(0.5, rng=0)
    x = Tensor(np.ones((1000,)))
    out = d(x).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.1
    d.eval()
    assert np.array_equal(d(x).data, x.data)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    a = GruReadout(3, 4, 2, rng)
    save_parameters(a, tmp_path / "ck", meta={"note": "x"})
    b = GruReadout(3, 4, 2, np.random.default_rng(99))
    meta = load_parameters(b, tmp_path / "ck")
    assert meta == {"note": "x"}
    sa, sb = a.state_dict(), b.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    with pytest.raises(ShapeError):
        load_parameters(GruReadout(3, 5, 2, rng), tmp_path / "ck")
