import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from nsdd.errors import NumericError, ShapeError, StateError
from nsdd.micro_net import (AdamState, Conv3x3, Downsample, Network, ReLU, SkipAdd, SkipSave,
                            TimeBias, Upsample, adam_step, backward, forward, load_network,
                            mse_loss, reducer_net, save_network, unet_backbone)
from nsdd.tensor_io import SeededRng
from oracles import central_difference, loop_network


def two_layer(rng, cin=2, hidden=3, cout=1):
    return Network([Conv3x3(cin, hidden, rng), ReLU(), Conv3x3(hidden, cout, rng)], cin)


def randomize_biases(net, rng):
    for layer in net.layers:
        if "bias" in layer.params:
            layer.params["bias"] = 0.1 * rng.normal(layer.params["bias"].shape)


def test_identity_conv():
    net = Network([Conv3x3(2, 2, init="identity")], 2)
    x = SeededRng(0).normal((5, 6, 2))
    assert np.array_equal(forward(net, x), x)


def test_zero_weights_constant_bias():
    conv = Conv3x3(1, 3, init="zeros")
    conv.params["bias"] = np.array([0.5, -1.0, 2.0])
    out = Network([conv], 1).forward(np.ones((4, 4, 1)))
    assert np.array_equal(out, np.broadcast_to([0.5, -1.0, 2.0], (4, 4, 3)))


def test_forward_matches_loop_reference():
    rng = SeededRng(1)
    net = unet_backbone(2, 2, rng, widths=(3, 4), time_value=0.3)
    randomize_biases(net, rng)
    x = rng.normal((4, 6, 2))
    assert np.max(np.abs(net.forward(x) - loop_network(net.layers, x))) < 1e-10


def test_output_shape_and_param_count():
    rng = SeededRng(2)
    net = unet_backbone(3, 3, rng)
    out = net.forward(rng.normal((2, 8, 8, 3)))
    assert out.shape == (2, 8, 8, 3)
    expected = (9 * 3 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 16 + 16) + (9 * 16 * 3 + 3)
    assert net.num_params == expected == net.get_params().size
    red = reducer_net(6, 3, rng)
    assert red.num_params == (9 * 6 * 16 + 16) + (9 * 16 * 16 + 16) + (9 * 16 * 3 + 3)


def test_shape_error_names_layer():
    net = Network([Conv3x3(1, 2, init="zeros"), Downsample()], 1)
    with pytest.raises(ShapeError, match="layer 1"):
        net.forward(np.zeros((5, 4, 1)))
    with pytest.raises(ShapeError, match="layer 0"):
        net.forward(np.zeros((4, 4, 3)))


def test_mismatched_construction():
    with pytest.raises(ShapeError, match="layer 2"):
        Network([Conv3x3(1, 2, init="zeros"), ReLU(), Conv3x3(3, 1, init="zeros")], 1)


def test_forward_is_bitwise_deterministic():
    rng = SeededRng(3)
    net = unet_backbone(1, 1, rng)
    x = rng.normal((8, 8, 1))
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_backward_without_forward():
    net = two_layer(SeededRng(0))
    with pytest.raises(StateError):
        net.backward(np.zeros((8, 8, 1)))
    net(np.zeros((8, 8, 2)))  # inference call keeps no cache
    with pytest.raises(StateError):
        net.backward(np.zeros((8, 8, 1)))


def _loss_for(net, x, target):
    def f(p):
        net.set_params(p)
        return mse_loss(net.forward(x), target)[0]
    return f


def _check_gradients(net, x, target, tol=1e-4):
    p0 = net.get_params()
    loss, dout = mse_loss(net.forward(x), target)
    grads, _ = net.backward(dout)
    ok = np.zeros(grads.shape, dtype=bool)
    # a step that straddles a ReLU kink breaks the difference quotient, so an
    # entry passes if it agrees at either step size
    for h in (1e-5, 1e-7):
        numeric = central_difference(_loss_for(net, x, target), p0, h)
        net.set_params(p0)
        rel = np.abs(grads - numeric) / (np.abs(grads) + 1e-8)
        # parameters with (numerically) zero gradient: compare absolutely
        ok |= (rel < tol) | (np.abs(grads - numeric) < 1e-9)
    return ok.all(), rel[~ok]


def test_gradient_check_two_layer():
    rng = SeededRng(5)
    net = two_layer(rng)
    randomize_biases(net, rng)
    x, target = rng.normal((8, 8, 2)), rng.normal((8, 8, 1))
    ok, bad = _check_gradients(net, x, target)
    assert ok, bad


def test_input_gradient_matches_finite_difference():
    rng = SeededRng(6)
    net = unet_backbone(1, 1, rng, widths=(3, 4))
    x, target = rng.normal((4, 4, 1)), rng.normal((4, 4, 1))
    _, dout = mse_loss(net.forward(x), target)
    _, dx = net.backward(dout)

    def f(v):
        return mse_loss(net.forward(v.reshape(x.shape)), target)[0]

    numeric = central_difference(f, x.ravel()).reshape(x.shape)
    assert np.max(np.abs(dx - numeric) / (np.abs(dx) + 1e-8)) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), cin=st.integers(1, 3), w0=st.integers(1, 3),
       w1=st.integers(1, 3), use_time=st.booleans())
@example(seed=20, cin=1, w0=3, w1=1, use_time=False)  # 1e-5 step crosses a ReLU kink
def test_gradient_check_property(seed, cin, w0, w1, use_time):
    rng = SeededRng(seed)
    net = unet_backbone(cin, cin, rng, widths=(w0, w1), time_value=0.2 if use_time else None)
    randomize_biases(net, rng)
    x, target = rng.normal((4, 4, cin)), rng.normal((4, 4, cin))
    ok, bad = _check_gradients(net, x, target)
    assert ok, bad


def test_zero_upstream_gives_zero_gradient():
    rng = SeededRng(7)
    net = unet_backbone(1, 1, rng)
    net.forward(rng.normal((8, 8, 1)))
    g, dx = net.backward(np.zeros((8, 8, 1)))
    assert not g.any() and not dx.any()


def test_batch_gradient_is_sum_of_items():
    rng = SeededRng(8)
    net = unet_backbone(1, 1, rng, widths=(3, 4))
    xs, dys = rng.normal((2, 8, 8, 1)), rng.normal((2, 8, 8, 1))
    net.forward(xs)
    g_batch = backward(net, dys)
    singles = []
    for i in range(2):
        net.forward(xs[i])
        singles.append(backward(net, dys[i]))
    assert np.allclose(g_batch, singles[0] + singles[1], atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    rng = SeededRng(9)
    net = unet_backbone(2, 1, rng, time_value=0.5)
    save_network(net, tmp_path / "ck")
    back = load_network(tmp_path / "ck")
    assert back.get_params().tobytes() == net.get_params().tobytes()
    assert back.manifest()["layers"] == net.manifest()["layers"]
    x = rng.normal((8, 8, 2))
    assert back.forward(x).tobytes() == net.forward(x).tobytes()


def test_skip_tags_must_exist():
    net = Network([SkipAdd("missing")], 1)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 2, 1)))


def test_upsample_downsample_time_layers_shapes():
    net = Network([SkipSave("a"), Downsample(), Upsample(), SkipAdd("a"), TimeBias(1.5)], 1)
    out = net.forward(np.ones((4, 4, 1)))
    assert np.array_equal(out, np.full((4, 4, 1), 3.5))


# Adam -------------------------------------------------------------------------


def test_adam_zero_grad_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(adam_step(AdamState(lr=0.1), p, np.zeros(3)), p)


def test_adam_first_step_magnitude():
    st_ = AdamState(lr=0.1)
    new = adam_step(st_, np.array([0.0]), np.array([1.0]))
    # m_hat = 1, v_hat = 1 after bias correction: step = lr / (1 + eps)
    assert new[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_quadratic_bowl():
    rng = SeededRng(10)
    target = rng.normal(5)
    p = np.zeros(5)
    st_ = AdamState(lr=0.05)
    for step in range(2000):
        p = adam_step(st_, p, 2 * (p - target))
        if np.sum((p - target) ** 2) < 1e-6:
            break
    assert np.sum((p - target) ** 2) < 1e-6


def test_adam_rejects_nan():
    with pytest.raises(NumericError):
        adam_step(AdamState(), np.zeros(2), np.array([0.0, np.nan]))
