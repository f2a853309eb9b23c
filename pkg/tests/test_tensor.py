import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsparse import tensor as T
from capsparse.optim import Adam, AdamState, adam_step
from capsparse.tensor import Tape, Tensor


def conv_loop(x, k, stride):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, o, i, j] += x[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
    return out


def grad_of(fn, *arrays):
    """Analytic grads of scalar fn(*tensors) in 64-bit."""
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = fn(*ts)
    tape.backward(loss)
    return [t.grad for t in ts]


def fd_check(fn, *arrays, h=1e-5):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = grad_of(fn, *arrays)
    for a, g in zip(arrays, analytic):
        num = T.numerical_grad(lambda: float(fn(*[Tensor(x, dtype=np.float64) for x in arrays]).data), a, h)
        assert T.relative_error(g, num) < 1e-4


# conv2d ---------------------------------------------------------------------------

def test_conv_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_delta_kernel_crops(rng):
    x = rng.random((2, 1, 7, 7)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    out = T.conv2d(Tensor(x), Tensor(k), 1)
    np.testing.assert_array_equal(out.data, x[:, :, 1:-1, 1:-1])


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), 2)
    assert out.shape == (2, 4, 3, 3)
    np.testing.assert_allclose(out.data, conv_loop(x, k, 2), rtol=1e-10, atol=1e-10)


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="larger"):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_gradients(rng, stride):
    x = rng.standard_normal((2, 2, 7, 7))
    k = rng.standard_normal((3, 2, 3, 3))
    w = rng.standard_normal((2, 3, (7 - 3) // stride + 1, (7 - 3) // stride + 1))
    fd_check(lambda a, b: T.reduce_sum(T.conv2d(a, b, stride) * Tensor(w, dtype=np.float64)), x, k)


# softmax --------------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]), 0).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)
    assert out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_rows_sum_to_one(rng):
    out = T.softmax(Tensor(rng.standard_normal((2, 5))), 1).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-6)


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


# backward -------------------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    (g,) = grad_of(lambda x: T.reduce_sum(x), rng.standard_normal((3, 4, 2)))
    np.testing.assert_array_equal(g, np.ones((3, 4, 2)))


def test_backward_square(rng):
    x = rng.standard_normal((5, 3))
    (g,) = grad_of(lambda t: T.reduce_sum(t * t), x)
    np.testing.assert_allclose(g, 2 * x)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_fan_out_accumulates(rng):
    x = rng.standard_normal(4)
    (g,) = grad_of(lambda t: T.reduce_sum(t * 3.0) + T.reduce_sum(t * t), x)
    np.testing.assert_allclose(g, 3.0 + 2 * x)


def test_tape_order_is_execution_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = T.relu(x * 2.0)
        T.reduce_sum(y)
    assert [n.op for n in tape.nodes] == ["mul", "relu", "sum"]


def test_stop_gradient_blocks(rng):
    x = rng.standard_normal(3)
    (g,) = grad_of(lambda t: T.reduce_sum(T.stop_gradient(t) * t), x)
    np.testing.assert_allclose(g, x)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


# finite differences for every primitive ---------------------------------------------

PRIMITIVES = {
    "add_broadcast": (lambda a, b: T.reduce_sum((a + b) * (a + b)), [(3, 4), (1, 4)]),
    "sub_broadcast": (lambda a, b: T.reduce_sum((a - b) * (a - b)), [(2, 3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: T.reduce_sum(a * b * a), [(3, 4), (3, 1)]),
    "div": (lambda a, b: T.reduce_sum(a / (b * b + 1.0)), [(3, 4), (3, 4)]),
    "matmul_batched": (lambda a, b: T.reduce_sum(T.matmul(a, b) * T.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "relu": (lambda a: T.reduce_sum(T.relu(a) * a), [(4, 5)]),
    "sigmoid": (lambda a: T.reduce_sum(T.sigmoid(a) * a), [(4, 5)]),
    "softmax": (lambda a: T.reduce_sum(T.softmax(a, 1) * T.softmax(a, 1) * 3.0), [(3, 6)]),
    "sqrt": (lambda a: T.reduce_sum(T.sqrt(a * a + 1.0)), [(3, 3)]),
    "exp": (lambda a: T.reduce_sum(T.exp(a * 0.5)), [(3, 3)]),
    "reshape_transpose": (lambda a: T.reduce_sum(a.reshape(2, 3, 4).transpose(2, 0, 1) * T.exp(a.reshape(4, 2, 3))), [(6, 4)]),
    "sum_axis": (lambda a: T.reduce_sum(T.reduce_sum(a, axis=(0, 2), keepdims=True) * a), [(2, 3, 4)]),
    "max_axis": (lambda a: T.reduce_sum(T.reduce_max(a, axis=1) * T.reduce_max(a, axis=1)), [(3, 5, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_finite_differences(name, rng):
    fn, shapes = PRIMITIVES[name]
    fd_check(fn, *[rng.standard_normal(s) for s in shapes])


def test_broadcast_backward_matches_loop_oracle(rng):
    a = rng.standard_normal((3, 1, 4))
    b = rng.standard_normal((2, 4))
    w = rng.standard_normal((3, 2, 4))
    ga, gb = grad_of(lambda x, y: T.reduce_sum((x * y) * Tensor(w, dtype=np.float64)), a, b)
    oa = np.zeros_like(a)
    ob = np.zeros_like(b)
    for i in range(3):
        for j in range(2):
            for k in range(4):
                oa[i, 0, k] += w[i, j, k] * b[j, k]
                ob[j, k] += w[i, j, k] * a[i, 0, k]
    np.testing.assert_allclose(ga, oa, rtol=1e-12)
    np.testing.assert_allclose(gb, ob, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_max_grad_is_one_hot_per_slice(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols))
    (g,) = grad_of(lambda t: T.reduce_sum(T.reduce_max(t, axis=1)), x)
    np.testing.assert_array_equal(g.sum(1), np.ones(rows))
    np.testing.assert_array_equal(g.argmax(1), x.argmax(1))


def test_debug_checks_name_the_op():
    with T.debug_checks(), pytest.warns(RuntimeWarning):
        with pytest.raises(T.NumericalError, match="sqrt"):
            T.sqrt(Tensor(np.array([-1.0])))


def test_precision_switch():
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_forward_determinism(rng):
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(k), 2).data
    b = T.conv2d(Tensor(x), Tensor(k), 2).data
    assert a.tobytes() == b.tobytes()


# adam -----------------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    adam_step([p], [np.zeros(3)], AdamState())
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_adam_first_step_size():
    p = np.array([0.5])
    adam_step([p], [np.array([1.0])], AdamState(lr=0.001))
    # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert 0.5 - p[0] == pytest.approx(0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_two_steps_constant_grad():
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.3
    p = np.array([2.0])
    st_ = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    expected = 2.0
    m = v = 0.0
    for t in (1, 2):
        adam_step([p], [np.array([g])], st_)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expected -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert st_.t == 2
    assert abs(p[0] - expected) < 1e-9


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState())


def test_adam_optimizer_detects_nan():
    p = Tensor(np.ones(2), requires_grad=True, name="w")
    opt = Adam([p])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(T.NumericalError, match="w"):
        opt.step()
