import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    check_gradients,
    direct_conv1d,
    direct_transposed_conv1d,
    op_gradient_cases,
    running_var_update,
)
from respnet.errors import DegenerateBatch, MissingGrad, NoTape, ShapeMismatch
from respnet.tensor import (
    ConvSpec,
    GradTape,
    Tensor,
    add,
    backward,
    batch_norm1d,
    concat_channels,
    conv1d,
    leaky_relu,
    sgd_momentum_step,
    smooth_l1_loss,
    transposed_conv1d,
)


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------------------
# convolution


def test_conv1d_identity_kernel():
    x = _t([[[1, 2, 3, 4]]])
    y = conv1d(x, _t([[[1]]]), None, ConvSpec(1, 1, 1))
    assert np.array_equal(y.data, x.data)


def test_conv1d_moving_sum():
    y = conv1d(_t([[[1, 2, 3, 4]]]), _t([[[1, 1]]]), None, ConvSpec(1, 1, 2))
    assert np.array_equal(y.data, [[[3, 5, 7]]])


def test_conv1d_stride_padding_dilation():
    x = _t([[[1, 2, 3, 4, 5, 6]]])
    y = conv1d(x, _t([[[1, 0, -1]]]), None, ConvSpec(1, 1, 3, stride=2, dilation=1, padding=1))
    assert np.array_equal(y.data, [[[-2, -2, -2]]])
    y = conv1d(x, _t([[[1, 1]]]), None, ConvSpec(1, 1, 2, dilation=2))
    assert np.array_equal(y.data, [[[4, 6, 8, 10]]])


def test_conv1d_bias_and_channels():
    x = _t([[[1, 2], [10, 20]]])
    w = _t([[[1], [1]], [[2], [0]]])
    y = conv1d(x, w, _t([0.5, -1]), ConvSpec(2, 2, 1))
    assert np.array_equal(y.data, [[[11.5, 22.5], [1, 3]]])


def test_conv1d_rejects_wrong_channels():
    with pytest.raises(ShapeMismatch):
        conv1d(_t(np.zeros((1, 2, 5))), _t(np.zeros((1, 3, 1))), None, ConvSpec(3, 1, 1))


def test_conv1d_rejects_empty_output():
    with pytest.raises(ValueError):
        conv1d(_t(np.zeros((1, 1, 2))), _t(np.zeros((1, 1, 5))), None, ConvSpec(1, 1, 5))


def test_transposed_conv_upsamples():
    x = _t([[[1, 2]]])
    y = transposed_conv1d(x, _t([[[1, 1]]]), None, ConvSpec(1, 1, 2, stride=2))
    assert np.array_equal(y.data, [[[1, 1, 2, 2]]])


def test_transposed_conv_overlap_adds():
    y = transposed_conv1d(_t([[[1, 2]]]), _t([[[1, 1, 1]]]), None, ConvSpec(1, 1, 3, stride=1))
    assert np.array_equal(y.data, [[[1, 3, 3, 2]]])


def test_transposed_conv_doubles_length_with_padding():
    spec = ConvSpec(3, 2, 4, stride=2, padding=1)
    y = transposed_conv1d(_t(np.ones((2, 3, 8))), _t(np.ones((3, 2, 4))), None, spec)
    assert y.shape == (2, 2, 16)


def test_conv_spec_lengths():
    spec = ConvSpec(1, 1, 4, stride=2, padding=1)
    assert spec.conv_length(2048) == 1024
    assert spec.transposed_length(1024) == 2048


conv_case = st.tuples(
    st.integers(1, 4),  # N
    st.integers(1, 4),  # C in
    st.integers(1, 4),  # C out
    st.integers(1, 8),  # k
    st.integers(1, 4),  # stride
    st.integers(1, 4),  # dilation
    st.integers(0, 4),  # padding
    st.integers(1, 64),  # L
    st.integers(0, 2**31 - 1),
    st.booleans(),
)


@settings(max_examples=150, deadline=None)
@given(conv_case)
def test_conv1d_matches_direct_loops(case):
    n, c, o, k, s, d, p, length, seed, with_bias = case
    spec = ConvSpec(c, o, k, stride=s, dilation=d, padding=p)
    if length + 2 * p < d * (k - 1) + 1:
        return
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((n, c, length)), rng.standard_normal((o, c, k))
    b = rng.standard_normal(o) if with_bias else None
    y = conv1d(_t(x), _t(w), None if b is None else _t(b), spec)
    assert np.max(np.abs(y.data - direct_conv1d(x, w, b, s, d, p))) <= 1e-12


@settings(max_examples=150, deadline=None)
@given(conv_case)
def test_transposed_conv1d_matches_direct_loops(case):
    n, c, o, k, s, d, p, length, seed, with_bias = case
    spec = ConvSpec(c, o, k, stride=s, dilation=d, padding=p)
    if (length - 1) * s + d * (k - 1) + 1 - 2 * p < 1:
        return
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((n, c, length)), rng.standard_normal((c, o, k))
    b = rng.standard_normal(o) if with_bias else None
    y = transposed_conv1d(_t(x), _t(w), None if b is None else _t(b), spec)
    assert np.max(np.abs(y.data - direct_transposed_conv1d(x, w, b, s, d, p))) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(conv_case)
def test_transposed_conv_is_adjoint_of_conv(case):
    n, c, o, k, s, d, p, length, seed, _ = case
    spec = ConvSpec(c, o, k, stride=s, dilation=d, padding=p)
    lout = spec.conv_length(length) if length + 2 * p >= d * (k - 1) + 1 else 0
    if lout < 1:
        return
    op = (length + 2 * p - d * (k - 1) - 1) % s
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, length))
    w = rng.standard_normal((o, c, k))
    u = rng.standard_normal((n, o, lout))
    ax = conv1d(_t(x), _t(w), None, spec).data
    # the transposed op maps O -> C channels with the same weight array
    tspec = ConvSpec(o, c, k, stride=s, dilation=d, padding=p)
    atu = transposed_conv1d(_t(u), _t(w), None, tspec, output_padding=op).data
    lhs, rhs = np.sum(ax * u), np.sum(x * atu)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------------------
# batch norm


def _bn_tensors(c):
    return (
        _t(np.ones(c), True),
        _t(np.zeros(c), True),
        _t(np.zeros(c)),
        _t(np.ones(c)),
    )


def test_batch_norm_training_standardises():
    x = _t([[[1, 2, 3, 4]]])
    g, b, rm, rv = _bn_tensors(1)
    y = batch_norm1d(x, g, b, rm, rv, training=True)
    expected = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(y.data[0, 0], expected, rtol=0, atol=1e-12)
    assert rm.data[0] == pytest.approx(0.25)
    assert rv.data[0] == pytest.approx(running_var_update(1.0, [1, 2, 3, 4], 0.1))


def test_batch_norm_running_stat_example():
    x = _t([[[0, 2]], [[0, 2]]])
    g, b, rm, rv = _bn_tensors(1)
    batch_norm1d(x, g, b, rm, rv, training=True)
    assert rm.data[0] == pytest.approx(0.1)
    # values 0,2,0,2: unbiased variance 4/3
    assert rv.data[0] == pytest.approx(0.9 + 0.1 * 4 / 3)


def test_batch_norm_eval_uses_running_stats():
    x = _t([[[3.0, 5.0]]])
    g, b, rm, rv = _bn_tensors(1)
    rm.data[...] = 1.0
    rv.data[...] = 4.0
    y = batch_norm1d(x, g, b, rm, rv, training=False)
    np.testing.assert_allclose(y.data, [[[2 / np.sqrt(4 + 1e-5), 4 / np.sqrt(4 + 1e-5)]]], atol=1e-12)
    assert rm.data[0] == 1.0 and rv.data[0] == 4.0


def test_batch_norm_single_value_training_is_degenerate():
    g, b, rm, rv = _bn_tensors(1)
    with pytest.raises(DegenerateBatch):
        batch_norm1d(_t([[[1.0]]]), g, b, rm, rv, training=True)


def test_batch_norm_zero_gamma_outputs_beta():
    rng = np.random.default_rng(0)
    g, b, rm, rv = _bn_tensors(3)
    g.data[...] = 0.0
    b.data[...] = [1, 2, 3]
    y = batch_norm1d(_t(rng.standard_normal((2, 3, 5))), g, b, rm, rv, training=True)
    assert np.array_equal(y.data, np.broadcast_to(np.array([1.0, 2, 3])[None, :, None], (2, 3, 5)))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def test_leaky_relu_values():
    y = leaky_relu(_t([-2.0, 0.0, 3.0]), 0.2)
    np.testing.assert_allclose(y.data, [-0.4, 0.0, 3.0], atol=1e-15)


def test_concat_and_add():
    a, b = _t(np.zeros((2, 1, 3))), _t(np.ones((2, 2, 3)))
    y = concat_channels(a, b)
    assert y.shape == (2, 3, 3)
    assert np.array_equal(y.data[:, 0], np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        concat_channels(a, _t(np.ones((2, 1, 4))))
    with pytest.raises(ShapeMismatch):
        add(a, b)


@pytest.mark.parametrize("d,expected", [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (1.0, 0.5), (2.0, 1.5), (-3.0, 2.5)])
def test_smooth_l1_values(d, expected):
    loss = smooth_l1_loss(_t([d]), np.zeros(1))
    assert loss.item() == expected


def test_smooth_l1_reductions():
    pred, target = _t([0.5, 2.0]), np.zeros(2)
    assert smooth_l1_loss(pred, target).item() == (0.125 + 1.5) / 2
    assert smooth_l1_loss(pred, target, reduction="sum").item() == 0.125 + 1.5


def test_smooth_l1_gradient_is_clipped():
    pred = _t([0.5, 2.0, -3.0], True)
    backward(smooth_l1_loss(pred, np.zeros(3), reduction="sum"))
    np.testing.assert_allclose(pred.grad, [0.5, 1.0, -1.0])


# ---------------------------------------------------------------------------
# autodiff


def test_backward_accumulates_shared_input():
    x = _t([[[1.0, -2.0]]], True)
    y = add(x, x)
    backward(smooth_l1_loss(y, np.zeros((1, 1, 2)), reduction="sum"))
    # d/dx |2x| -> 2 sign(x) when |2x| >= 1
    np.testing.assert_allclose(x.grad, [[[2.0, -2.0]]])


def test_grad_tape_orders_ops():
    x = _t(np.ones((1, 1, 4)), True)
    loss = smooth_l1_loss(leaky_relu(x), np.zeros((1, 1, 4)))
    tape = GradTape(loss)
    assert tape.ops() == ["leaky_relu", "smooth_l1_loss"]


def test_backward_without_graph_raises():
    with pytest.raises(NoTape):
        backward(_t(1.0))


def test_constant_loss_gives_zero_grad():
    x = _t(np.ones((1, 1, 3)), True)
    w = _t(np.zeros((1, 1, 1)), True)
    loss = smooth_l1_loss(conv1d(x, w, None, ConvSpec(1, 1, 1)), np.zeros((1, 1, 3)))
    backward(loss)
    assert np.array_equal(x.grad, np.zeros_like(x.data))


@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, tensors, build in op_gradient_cases(rng):
        err = check_gradients(build, tensors, rng, n_coords=6)
        assert err < 1e-4, (name, err)


# ---------------------------------------------------------------------------
# optimiser


def test_sgd_momentum_two_steps():
    p = _t([1.0], True)
    v = {}
    p.grad = np.array([1.0])
    sgd_momentum_step({"p": p}, v, lr=0.1, momentum=0.5)
    assert p.data[0] == pytest.approx(0.9) and p.grad is None
    p.grad = np.array([1.0])
    sgd_momentum_step({"p": p}, v, lr=0.1, momentum=0.5)
    # v = 0.5 * 1 + 1 = 1.5
    assert p.data[0] == pytest.approx(0.9 - 0.15)


def test_sgd_zero_lr_leaves_params():
    p = _t([1.0, 2.0], True)
    p.grad = np.array([3.0, -1.0])
    sgd_momentum_step({"p": p}, {}, lr=0.0, momentum=0.7)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_sgd_skips_buffers_and_requires_grads():
    buf = _t([5.0])
    p = _t([1.0], True)
    with pytest.raises(MissingGrad):
        sgd_momentum_step({"p": p, "buf": buf}, {}, lr=0.1, momentum=0.0)
    p.grad = np.array([1.0])
    sgd_momentum_step({"p": p, "buf": buf}, {}, lr=0.1, momentum=0.0)
    assert buf.data[0] == 5.0
