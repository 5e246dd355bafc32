import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpfn.autodiff import (
    Adam,
    Tensor,
    check_gradients,
    debug_mode,
    matmul,
    no_grad,
)
from dpfn.autodiff import functional as F

TRIALS = 20
LINEAR_TOL = 1e-6
TOL = 1e-5


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def worst_over_trials(build):
    """``build(rng)`` returns (f, inputs); the worst relative error over 20 seeds."""
    worst = 0.0
    for trial in range(TRIALS):
        f, inputs = build(np.random.default_rng(trial))
        worst = max(worst, check_gradients(f, inputs))
    return worst


# -- forward values ------------------------------------------------------------


def test_matmul_identity():
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_value():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_and_leaky_values():
    assert F.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert F.leaky_relu(Tensor([-1.0]), 0.01).data[0] == pytest.approx(-0.01)


def test_sigmoid_tanh_values():
    x = np.array([-3.0, 0.0, 2.5])
    np.testing.assert_allclose(F.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-15, atol=1e-16)
    np.testing.assert_allclose(F.tanh(Tensor(x)).data, np.tanh(x))


def test_sigmoid_saturates_without_overflow():
    with debug_mode():
        out = F.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_layer_norm_constant_input_is_zero():
    out = F.layer_norm(Tensor(np.full((3, 4), 2.5)), axis=-1)
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_hand_value():
    out = F.layer_norm(Tensor([1.0, -1.0]), axis=-1, eps=1e-12)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-10)


def test_layer_norm_affine():
    x = Tensor([[1.0, 3.0]])
    out = F.layer_norm(x, -1, Tensor([2.0, 2.0]), Tensor([1.0, 0.0]), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 2.0]])


def test_conv1d_shapes_and_identity_kernel(rng):
    x = Tensor(rng.normal(size=(1, 4)))
    assert F.conv1d(x, Tensor(np.ones((1, 1, 2)))).shape == (1, 3)
    np.testing.assert_array_equal(F.conv1d(x, Tensor(np.ones((1, 1, 1)))).data, x.data)


def test_conv1d_stride_shape(rng):
    x = Tensor(rng.normal(size=(2, 3, 17)))
    w = Tensor(rng.normal(size=(4, 3, 5)))
    assert F.conv1d(x, w, stride=3).shape == (2, 4, (17 - 5) // 3 + 1)


def test_conv1d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 9))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    out = F.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    ref = np.zeros((3, 4))
    for o in range(3):
        for t in range(4):
            ref[o, t] = b[o] + np.sum(w[o] * x[:, 2 * t : 2 * t + 3])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv1d_too_short_input():
    with pytest.raises(ValueError, match="short"):
        F.conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 3))))


def test_transpose_conv1d_length():
    out = F.transpose_conv1d(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 1, 2))), stride=2)
    assert out.shape == (1, 6)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_transpose_conv1d_is_adjoint_of_conv1d(stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(3, 20))
    w = rng.normal(size=(4, 3, 5))
    y_len = (20 - 5) // stride + 1
    y = rng.normal(size=(4, y_len))
    lhs = np.sum(F.conv1d(Tensor(x), Tensor(w), stride=stride).data * y)
    back = F.transpose_conv1d(Tensor(y), Tensor(w), stride=stride).data
    rhs = np.sum(x[:, : back.shape[-1]] * back)
    assert abs(lhs - rhs) < 1e-10


def test_lstm_cell_zero_case(rng):
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    h, c = F.lstm_cell(Tensor(rng.normal(size=3)), z(2), z(2), z(8, 3), z(8, 2), z(8))
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def lstm_params(rng, h_in, hidden):
    return (leaf(rng, 4 * hidden, h_in), leaf(rng, 4 * hidden, hidden), leaf(rng, 4 * hidden))


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_lstm_matches_cell_chain(rng, reverse):
    x = rng.normal(size=(2, 5, 3))
    w_ih, w_hh, b = lstm_params(rng, 3, 4)
    fused = F.lstm(Tensor(x), w_ih, w_hh, b, reverse=reverse).data
    h = c = Tensor(np.zeros((2, 4)))
    outs = [None] * 5
    steps = range(4, -1, -1) if reverse else range(5)
    for t in steps:
        h, c = F.lstm_cell(Tensor(x[:, t]), h, c, w_ih, w_hh, b)
        outs[t] = h.data
    np.testing.assert_allclose(fused, np.stack(outs, axis=1), atol=1e-14)


def test_bilstm_length_one(rng):
    x = Tensor(rng.normal(size=(1, 3)))
    fp, bp = lstm_params(rng, 3, 2), lstm_params(rng, 3, 2)
    zero = Tensor(np.zeros(2))
    hf, _ = F.lstm_cell(x[0], zero, zero, *fp)
    hb, _ = F.lstm_cell(x[0], zero, zero, *bp)
    np.testing.assert_allclose(F.bilstm(x, fp, bp).data[0], np.concatenate([hf.data, hb.data]), atol=1e-15)


def test_bilstm_reversal_swaps_halves(rng):
    x = rng.normal(size=(6, 3))
    p = lstm_params(rng, 3, 2)
    out = F.bilstm(Tensor(x), p, p).data
    rev = F.bilstm(Tensor(x[::-1].copy()), p, p).data
    np.testing.assert_allclose(rev[:, :2], out[::-1, 2:], atol=1e-14)
    np.testing.assert_allclose(rev[:, 2:], out[::-1, :2], atol=1e-14)


def test_mean_of_constant(rng):
    assert np.all(Tensor(np.full((3, 5), 7.0)).mean(axis=1).data == 7.0)


def test_axis_out_of_range():
    with pytest.raises(IndexError):
        Tensor(np.ones((2, 3))).sum(axis=2)
    with pytest.raises(IndexError):
        Tensor(np.ones((2, 3))).mean(axis=-3)


def test_concat_split_identity(rng):
    x = rng.normal(size=(4, 7))
    a, b = F.split(Tensor(x), [3], axis=1)
    np.testing.assert_array_equal(F.concat([a, b], axis=1).data, x)


def test_pad_values():
    out = F.pad(Tensor([[1.0, 2.0]]), [(0, 0), (1, 2)], value=-1.0)
    assert out.data.tolist() == [[-1.0, 1.0, 2.0, -1.0, -1.0]]


# -- backward semantics ----------------------------------------------------------


def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_grad_of_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_twice_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    assert x.grad.tolist() == [4.0, 8.0]
    x.zero_grad()
    assert x.grad is None


def test_diamond_graph_counts_once():
    x = Tensor([3.0], requires_grad=True)
    y = x + x
    z = y * y  # 4 x^2 -> 8x
    z.sum().backward()
    assert x.grad.tolist() == [24.0]


def test_non_scalar_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_deep_chain_no_recursion_limit():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad.tolist() == [1.0]


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y.is_leaf


def test_debug_mode_detects_nan():
    with debug_mode():
        with pytest.raises(FloatingPointError):
            Tensor([-1.0]).log()
    with np.errstate(invalid="ignore"):
        assert np.isnan(Tensor([-1.0]).log().data[0])


def test_broadcast_gradients(rng):
    a = leaf(rng, 3, 1)
    b = leaf(rng, 4)
    (a * b).sum().backward()
    np.testing.assert_allclose(a.grad[:, 0], np.full(3, b.data.sum()))
    np.testing.assert_allclose(b.grad, np.full(4, a.data.sum()))


def test_deterministic_forward(rng):
    x = rng.normal(size=(2, 3, 20))
    w = rng.normal(size=(4, 3, 5))
    a = F.conv1d(Tensor(x), Tensor(w)).data
    b = F.conv1d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()


# -- finite-difference checks (20 random trials each) ------------------------------


def test_gradcheck_matmul():
    def build(rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        return (lambda: a @ b), [a, b]

    assert worst_over_trials(build) < LINEAR_TOL


def test_gradcheck_batched_matmul():
    def build(rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 2)
        return (lambda: (a @ b) * 1.5), [a, b]

    assert worst_over_trials(build) < LINEAR_TOL


@pytest.mark.parametrize(
    "name,fn,low",
    [
        ("add", lambda a, b: a + b, -1),
        ("sub", lambda a, b: a - b, -1),
        ("mul", lambda a, b: a * b, -1),
        ("div", lambda a, b: a / b, 0.5),
    ],
)
def test_gradcheck_binary(name, fn, low):
    def build(rng):
        a = leaf(rng, 3, 4, low=low)
        b = leaf(rng, 1, 4, low=low)
        return (lambda: fn(a, b) * leaf_weights), [a, b]

    leaf_weights = Tensor(np.random.default_rng(99).normal(size=(3, 4)))
    tol = LINEAR_TOL if name in ("add", "sub") else TOL
    assert worst_over_trials(build) < tol


@pytest.mark.parametrize(
    "name,fn,low",
    [
        ("exp", lambda x: x.exp(), -1),
        ("log", lambda x: x.log(), 0.2),
        ("sqrt", lambda x: x.sqrt(), 0.2),
        ("pow", lambda x: x**3, -1),
        ("tanh", lambda x: x.tanh(), -2),
        ("sigmoid", lambda x: x.sigmoid(), -3),
        ("relu", lambda x: x.relu(), -1),
        ("leaky_relu", lambda x: F.leaky_relu(x, 0.1), -1),
        ("log_softmax", lambda x: F.log_softmax(x, axis=-1), -2),
    ],
)
def test_gradcheck_unary(name, fn, low):
    weights = Tensor(np.random.default_rng(7).normal(size=(3, 5)))

    def build(rng):
        x = leaf(rng, 3, 5, low=low, high=abs(low) + 1)
        return (lambda: fn(x) * weights), [x]

    assert worst_over_trials(build) < TOL


@pytest.mark.parametrize(
    "name,fn",
    [
        ("sum_axis", lambda x: x.sum(axis=1)),
        ("mean_axis", lambda x: x.mean(axis=(0, 2), keepdims=True)),
        ("mean_all", lambda x: x.mean()),
        ("reshape", lambda x: x.reshape(6, 4) * Tensor(np.arange(24.0).reshape(6, 4))),
        ("transpose", lambda x: x.transpose(2, 0, 1) * Tensor(np.arange(24.0).reshape(4, 2, 3))),
        ("getitem_basic", lambda x: x[:, 1:, ::2]),
        ("getitem_fancy", lambda x: x[np.array([0, 0, 1])][:, [2, 0]]),
        ("pad", lambda x: F.pad(x, [(0, 0), (1, 0), (2, 1)]) * 2.0),
        ("concat", lambda x: F.concat([x, x[:, :1] * 3.0], axis=1)),
        ("stack", lambda x: F.stack([x, x * 2.0], axis=1)),
        ("split", lambda x: F.split(x, [1], axis=2)[1] * 3.0),
        ("frames", lambda x: F.frames(x, 2, 1) * Tensor(np.arange(18.0).reshape(2, 3, 1, 3) + 1)),
        ("overlap_add", lambda x: F.overlap_add(x, 1) * Tensor(np.arange(12.0).reshape(2, 6) + 1)),
    ],
)
def test_gradcheck_linear_shape_ops(name, fn):
    def build(rng):
        x = leaf(rng, 2, 3, 4)
        return (lambda: fn(x)), [x]

    assert worst_over_trials(build) < LINEAR_TOL


def test_gradcheck_conv1d():
    def build(rng):
        x, w, b = leaf(rng, 2, 10), leaf(rng, 3, 2, 3), leaf(rng, 3)
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        return (lambda: F.conv1d(x, w, b, stride=stride, padding=pad)), [x, w, b]

    assert worst_over_trials(build) < LINEAR_TOL


def test_gradcheck_transpose_conv1d():
    def build(rng):
        x, w, b = leaf(rng, 2, 2, 5), leaf(rng, 2, 3, 4), leaf(rng, 3)
        stride = int(rng.integers(1, 4))
        return (lambda: F.transpose_conv1d(x, w, stride=stride, bias=b)), [x, w, b]

    assert worst_over_trials(build) < LINEAR_TOL


def test_gradcheck_layer_norm():
    def build(rng):
        x, g, b = leaf(rng, 3, 4, 2), leaf(rng, 4), leaf(rng, 4)
        weights = Tensor(rng.normal(size=(3, 4, 2)))
        return (lambda: F.layer_norm(x, 1, g, b) * weights), [x, g, b]

    assert worst_over_trials(build) < TOL


def test_gradcheck_prelu():
    def build(rng):
        x, a = leaf(rng, 2, 3, 4), leaf(rng, 3)
        return (lambda: F.prelu(x, a, axis=1) * 1.7), [x, a]

    assert worst_over_trials(build) < TOL


def test_gradcheck_cross_entropy():
    def build(rng):
        logits = leaf(rng, 4, 5, low=-2, high=2)
        target = rng.integers(0, 5, size=4)
        return (lambda: F.cross_entropy(logits, target)), [logits]

    assert worst_over_trials(build) < TOL


def test_gradcheck_lstm_cell_bptt():
    def build(rng):
        xs = leaf(rng, 4, 3)
        params = lstm_params(rng, 3, 2)
        h0, c0 = leaf(rng, 2), leaf(rng, 2)

        def f():
            h, c = h0, c0
            out = []
            for t in range(4):
                h, c = F.lstm_cell(xs[t], h, c, *params)
                out.append(h)
            return F.stack(out) * Tensor(np.arange(1.0, 9.0).reshape(4, 2))

        return f, [xs, h0, c0, *params]

    assert worst_over_trials(build) < TOL


@pytest.mark.parametrize("reverse", [False, True])
def test_gradcheck_fused_lstm(reverse):
    def build(rng):
        x = leaf(rng, 2, 4, 3)
        params = lstm_params(rng, 3, 2)
        weights = Tensor(rng.normal(size=(2, 4, 2)))
        return (lambda: F.lstm(x, *params, reverse=reverse) * weights), [x, *params]

    assert worst_over_trials(build) < TOL


def test_gradcheck_bilstm():
    def build(rng):
        x = leaf(rng, 3, 2)
        fp, bp = lstm_params(rng, 2, 2), lstm_params(rng, 2, 2)
        weights = Tensor(rng.normal(size=(3, 4)))
        return (lambda: F.bilstm(x, fp, bp) * weights), [x, *fp, *bp]

    assert worst_over_trials(build) < TOL


# -- optimizer -----------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_descends_on_square():
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    (p * p).sum().backward()
    opt.step()
    assert p.data[0] ** 2 < 1.0


def test_adam_missing_grad_names_parameter():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(RuntimeError, match="weight_x"):
        Adam([("weight_x", p)]).step()


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Tensor(rng.normal(size=4), requires_grad=True)
        opt = Adam([("p", p)], lr=0.05, clip_norm=1.0)
        for _ in range(10):
            opt.zero_grad()
            ((p * p).sum() + p.sum()).backward()
            opt.step()
        return p.data.tobytes()

    assert run() == run()


# -- properties ----------------------------------------------------------------------


@given(
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(1, 3),
    st.integers(0, 2**31 - 1),
)
def test_conv_adjoint_property(c_in, c_out, k, stride, seed):
    rng = np.random.default_rng(seed)
    t = k + stride * int(rng.integers(0, 6))
    x = rng.normal(size=(c_in, t))
    w = rng.normal(size=(c_out, c_in, k))
    y = rng.normal(size=(c_out, (t - k) // stride + 1))
    lhs = np.sum(F.conv1d(Tensor(x), Tensor(w), stride=stride).data * y)
    rhs = np.sum(x * F.transpose_conv1d(Tensor(y), Tensor(w), stride=stride).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
def test_sum_grad_property(values):
    x = Tensor(np.array(values), requires_grad=True)
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, 3.0)
