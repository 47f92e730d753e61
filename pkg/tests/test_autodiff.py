import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stncell.autodiff import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    concat,
    conv2d,
    dense,
    finite_diff_gradcheck,
    flatten,
    maxpool2d,
    no_grad,
    relu,
    softmax,
)
from stncell.errors import ContractError, DimensionError


def test_tensor_basics():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.values.dtype == np.float64
    assert t.size == 4
    assert t.grad is None
    assert Tensor(1.0).node_id != Tensor(1.0).node_id


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_backward_twice_accumulates():
    x = Tensor([0.5, -1.5, 2.0], requires_grad=True)
    y = (x * x * x).sum()
    y.backward()
    first = x.grad.copy()
    y.backward()
    assert np.array_equal(x.grad, 2 * first)


def test_shared_subexpression_gradient():
    x = Tensor(3.0, requires_grad=True)
    a = x * 2
    (a * a + a).backward()
    # d/dx (4x^2 + 2x) = 8x + 2
    assert x.grad == pytest.approx(26.0)


def test_no_grad_disables_tracking():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3
    assert not y.requires_grad
    assert (x * 3).requires_grad


def test_elementwise_and_reduction_ops_gradcheck():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))

    def f(x, y):
        z = (x / y - y ** 2).exp().mean(axis=0) + (x * y).sqrt().log().sum(axis=1, keepdims=True).transpose().sum()
        return z.sum() + x[1:, ::2].sum() + x.reshape(12)[[0, 0, 5]].sum()

    assert finite_diff_gradcheck(f, [a, b]).passed


def test_concat_and_matmul_gradcheck():
    rng = np.random.default_rng(2)
    a, b, m = rng.standard_normal((2, 3)), rng.standard_normal((2, 2)), rng.standard_normal((4, 5))
    report = finite_diff_gradcheck(lambda x, y, w: ((concat([x, y], axis=1) @ w.transpose()) ** 2).sum(), [a, b, m])
    assert report.passed


# -- conv2d ------------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 3, 3))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), padding="same")
    assert np.array_equal(out.values, x)


def test_conv_valid_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding="valid")
    assert out.shape == (1, 1, 1)
    assert out.values.item() == 9.0


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, k, b = rng.standard_normal((2, 6, 7)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), padding="same").values
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 6, 7))
    for o in range(3):
        for i in range(6):
            for j in range(7):
                ref[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * k[o]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_strided_shape():
    out = conv2d(Tensor(np.zeros((2, 3, 9, 8))), Tensor(np.zeros((4, 3, 5, 5))), Tensor(np.zeros(4)), stride=2)
    assert out.shape == (2, 4, 5, 4)


def test_conv_gradcheck_sum():
    rng = np.random.default_rng(4)
    x, k, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    report = finite_diff_gradcheck(lambda a, w, c: conv2d(a, w, c).sum(), [x, k, b], tol=1e-5)
    assert report.passed


@pytest.mark.parametrize(
    "x_shape,k_shape,b_shape",
    [((2, 5, 5), (3, 3, 3, 3), (3,)), ((2, 5, 5), (3, 2, 2, 2), (3,)), ((2, 5, 5), (3, 2, 3, 3), (2,))],
)
def test_conv_shape_errors(x_shape, k_shape, b_shape):
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(k_shape)), Tensor(np.zeros(b_shape)))


# -- maxpool ------------------------------------------------------------------------


def test_maxpool_examples():
    assert maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).values.tolist() == [[[4.0]]]
    out = maxpool2d(Tensor(np.full((1, 4, 4), 7.0)))
    assert out.shape == (1, 2, 2) and np.all(out.values == 7.0)


def test_maxpool_gradient_one_hot_per_window():
    rng = np.random.default_rng(5)
    x = Tensor(rng.permutation(64).reshape(1, 8, 8) / 64.0, requires_grad=True)
    maxpool2d(x).sum().backward()
    windows = x.grad.reshape(1, 4, 2, 4, 2).transpose(0, 1, 3, 2, 4).reshape(1, 4, 4, 4)
    assert np.all(windows.sum(axis=-1) == 1.0)
    assert finite_diff_gradcheck(lambda a: (maxpool2d(a) ** 2).sum(), [x.values]).passed


def test_maxpool_ties_go_to_first():
    x = Tensor(np.full((1, 2, 2), 3.0), requires_grad=True)
    maxpool2d(x).sum().backward()
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_maxpool_odd_size_rejected():
    with pytest.raises(DimensionError):
        maxpool2d(Tensor(np.zeros((1, 5, 4))))


def test_maxpool_same_3x3_keeps_size():
    out = maxpool2d(Tensor(np.zeros((2, 3, 5, 7))), window=3, stride=1, padding="same")
    assert out.shape == (2, 3, 5, 7)


# -- dense, relu, softmax ---------------------------------------------------------------


def test_dense_examples():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).values, x)
    b = np.array([0.5, -1.0])
    assert np.array_equal(dense(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b)).values, b)


def test_dense_gradcheck():
    rng = np.random.default_rng(6)
    report = finite_diff_gradcheck(
        lambda a, w, c: (dense(a, w, c) ** 2).sum(),
        [rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal(3)],
        tol=1e-6,
    )
    assert report.passed


def test_dense_shape_error():
    with pytest.raises(DimensionError):
        dense(Tensor(np.zeros(4)), Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)))


def test_relu_examples():
    assert relu(Tensor([-1.0, 0.0, 2.0])).values.tolist() == [0.0, 0.0, 2.0]
    x = Tensor(-np.arange(1.0, 5.0), requires_grad=True)
    out = relu(x)
    out.sum().backward()
    assert np.all(out.values == 0) and np.all(x.grad == 0)


def test_relu_gradient_is_indicator():
    x = Tensor([-0.7, 0.0, 0.3, 1.2], requires_grad=True)
    relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0, 1.0]


def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).values, 1 / 3, atol=1e-15)
    big = softmax(Tensor([1000.0, 0.0, 0.0])).values
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0)


def test_softmax_jacobian():
    x = np.random.default_rng(7).standard_normal(3)
    for k in range(3):
        assert finite_diff_gradcheck(lambda a: softmax(a)[k], [x], tol=1e-6).passed


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one(x):
    p = softmax(Tensor(x)).values
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_flatten_keeps_batch():
    assert flatten(Tensor(np.zeros((2, 3, 4, 5)))).shape == (2, 60)
    assert flatten(Tensor(np.zeros((3, 4, 5)))).shape == (60,)


def test_composite_graph_gradcheck():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    w = rng.standard_normal((4, 27))
    def f(a, kern, wt):
        h = maxpool2d(relu(conv2d(a, kern, Tensor(np.zeros(3)))))
        h = flatten(h)
        h = dense(h, wt, Tensor(np.zeros(4)))
        return (h * h).sum()

    report = finite_diff_gradcheck(f, [x, k, w], tol=1e-5)
    assert report.passed


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x, k = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = maxpool2d(relu(conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4))))).values
    b = maxpool2d(relu(conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4))))).values
    assert a.tobytes() == b.tobytes()


# -- Adam ----------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.values, [1.0, -2.0])
    assert state.step == 1

    # Moments left over from earlier steps decay geometrically.
    state.m = [np.array([0.5, 0.5])]
    state.v = [np.array([0.25, 0.25])]
    adam_step([p], [np.zeros(2)], state)
    assert np.allclose(state.m[0], 0.45) and np.allclose(state.v[0], 0.25 * 0.999)


def test_adam_first_step_moves_by_lr_sign():
    g = np.array([3.0, -0.01, 250.0])
    p = Tensor(np.zeros(3), requires_grad=True)
    adam_step([p], [g], AdamState(lr=0.01))
    assert np.allclose(p.values, -0.01 * np.sign(g), rtol=1e-5)


def test_adam_constant_gradient_monotone():
    p = Tensor(np.array(5.0), requires_grad=True)
    opt = Adam([p], lr=0.05)
    trace = []
    for _ in range(100):
        p.grad = np.array(1.0)
        opt.step()
        trace.append(float(p.values))
    assert all(b < a for a, b in zip(trace, trace[1:]))


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step([Tensor(np.zeros(3))], [np.zeros(2)], AdamState())


def test_adam_state_validation():
    with pytest.raises(ContractError):
        AdamState(lr=0.0)


# -- gradcheck harness ------------------------------------------------------------------


def test_gradcheck_linear_exact():
    c = np.array([1.5, -2.0, 0.25])
    report = finite_diff_gradcheck(lambda x: (x * c).sum(), [np.array([0.3, 0.1, -0.7])])
    assert report.passed and report.max_rel_error < 1e-9


def test_gradcheck_quadratic():
    a = np.random.default_rng(10).standard_normal((5, 5))
    q = a @ a.T
    report = finite_diff_gradcheck(lambda x: (x * (Tensor(q) @ x.reshape(5, 1)).reshape(5)).sum(), [np.ones(5)], tol=1e-6)
    assert report.passed


def test_gradcheck_detects_wrong_gradient():
    def doubled(x):
        return Tensor(float((x.values ** 2).sum()), parents=(x,), backward_fn=lambda g: (4 * x.values * g,))

    report = finite_diff_gradcheck(doubled, [np.array([0.5, -1.0])])
    assert not report.passed
    assert len(report.failures) == 2


def test_gradcheck_rejects_bad_eps():
    with pytest.raises(ContractError):
        finite_diff_gradcheck(lambda x: x.sum(), [np.zeros(2)], eps=0.0)
