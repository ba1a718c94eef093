import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omnifield import tensor as T
from omnifield.tensor import Tape, Tensor, grad_check


def _fd_grad(f, x, h=1e-6):
    """Independent central-difference gradient of a scalar numpy function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _tape_grad(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return [tape.grad(t) for t in leaves]


PRIMS = {
    "add": (lambda a, b: T.sum(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sum(T.square(T.sub(a, b))), [(2, 3), (2, 1)]),
    "mul": (lambda a, b: T.sum(T.mul(a, b)), [(3, 4), (1, 4)]),
    "scale": (lambda a: T.sum(T.square(T.scale(a, -2.5))), [(5,)]),
    "exp": (lambda a: T.sum(T.exp(a)), [(3, 2)]),
    "power": (lambda a: T.sum(T.power(T.add(T.square(a), 1.0), 1.5)), [(4,)]),
    "square": (lambda a: T.sum(T.square(a)), [(2, 2)]),
    "sqrt": (lambda a: T.sum(T.sqrt(T.add(T.square(a), 0.5))), [(6,)]),
    "gelu": (lambda a: T.sum(T.mul(T.gelu(a), a)), [(7,)]),
    "matmul": (lambda a, b: T.sum(T.square(T.matmul(a, b))), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: T.sum(T.square(T.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "transpose": (lambda a: T.sum(T.mul(T.transpose(a, (2, 0, 1)), np.arange(24.0).reshape(4, 2, 3))), [(2, 3, 4)]),
    "reshape": (lambda a: T.sum(T.square(T.reshape(a, (3, 4))) * np.arange(12.0).reshape(3, 4)), [(2, 6)]),
    "take": (lambda a: T.sum(T.square(T.take(a, (slice(1, 3), 0)))), [(4, 3)]),
    "concat": (lambda a, b: T.sum(T.square(T.concat([a, b], axis=1)) * np.arange(10.0).reshape(2, 5)), [(2, 2), (2, 3)]),
    "sum_axis": (lambda a: T.sum(T.square(T.sum(a, axis=1))), [(3, 4)]),
    "mean_axis": (lambda a: T.sum(T.square(T.mean(a, axis=0, keepdims=True))), [(3, 4)]),
    "softmax": (lambda a: T.sum(T.mul(T.softmax(a), np.arange(12.0).reshape(3, 4))), [(3, 4)]),
    "softmax_masked": (
        lambda a: T.sum(T.mul(T.softmax(a, mask=np.where(np.arange(4) < 3, 0.0, T.MASK_VALUE)), np.arange(4.0))),
        [(2, 4)],
    ),
    "layer_norm": (lambda a, g, b: T.sum(T.mul(T.layer_norm(a, g, b), np.arange(15.0).reshape(3, 5))), [(3, 5), (5,), (5,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_match_finite_differences(name, seed):
    f, shapes = PRIMS[name]
    rng = np.random.default_rng(seed)
    inputs = [rng.normal(size=s) for s in shapes]
    assert grad_check(f, inputs) < 1e-5


def test_grad_check_agrees_with_independent_difference_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    (ga, gb) = _tape_grad(lambda x, y: T.sum(T.square(T.matmul(x, y))), a, b)
    np.testing.assert_allclose(ga, _fd_grad(lambda x: np.sum((x @ b) ** 2), a), atol=1e-6)
    np.testing.assert_allclose(gb, _fd_grad(lambda y: np.sum((a @ y) ** 2), b), atol=1e-6)


def test_softmax_gradient_matches_closed_form_jacobian():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=5), rng.normal(size=5)
    (g,) = _tape_grad(lambda a: T.sum(T.mul(T.softmax(a), w)), x)
    p = np.exp(x - x.max())
    p /= p.sum()
    jac = np.diag(p) - np.outer(p, p)
    np.testing.assert_allclose(g, jac @ w, atol=1e-12)


def test_layer_norm_forward_matches_definition():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    out = T.layer_norm(x).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_masked_softmax_gives_exact_zero_weight():
    logits = np.array([[1.0, 2.0, 50.0]])
    out = T.softmax(logits, mask=np.array([0.0, 0.0, T.MASK_VALUE])).data
    assert out[0, 2] == 0.0
    np.testing.assert_allclose(out[0, :2], np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum())


def test_sum_of_scaled_input_has_constant_gradient():
    (g,) = _tape_grad(lambda a: T.sum(T.scale(a, 3.0)), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(g, [3.0, 3.0])


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.square(x))
    tape.backward(y)
    with pytest.raises(T.TapeError):
        tape.backward(y)


def test_non_scalar_loss_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.square(x)
    with pytest.raises(T.TapeError):
        tape.backward(y)


def test_detached_inputs_receive_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0, 6.0])
    with Tape() as tape:
        y = T.sum(T.mul(x, c))
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(c), 0.0)
    np.testing.assert_array_equal(tape.grad(x), [5.0, 6.0])
    with Tape():
        d = T.sum(T.mul(x.detach(), c))
    assert d._tape is None


def test_no_tape_means_detached_result():
    x = Tensor([1.0], requires_grad=True)
    assert T.square(x)._tape is None


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([[3.0]], requires_grad=True)
    with Tape() as tape:
        y = T.sum(x)
    tape.backward(y)
    np.testing.assert_array_equal(tape.grad(unused), [[0.0]])


def test_fan_out_accumulates_gradients():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.add(T.mul(x, x), T.scale(x, 3.0)))
    tape.backward(y)
    np.testing.assert_allclose(tape.grad(x), [7.0])


@pytest.mark.parametrize(
    "op",
    [
        lambda: T.matmul(np.ones((2, 3)), np.ones((2, 3))),
        lambda: T.matmul(np.ones(3), np.ones((3, 1))),
        lambda: T.add(np.ones((2, 3)), np.ones((3, 2))),
        lambda: T.mul(np.ones((4,)), np.ones((3,))),
        lambda: T.reshape(np.ones((2, 3)), (4, 2)),
        lambda: T.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1),
        lambda: T.transpose(np.ones((2, 3)), (0, 0)),
        lambda: T.softmax(np.ones((2, 3)), mask=np.ones((4,))),
    ],
)
def test_shape_errors(op):
    with pytest.raises(T.ShapeError):
        op()


def test_strict_mode_rejects_non_finite_input():
    T.set_strict(True)
    with pytest.raises(FloatingPointError):
        T.exp(np.array([np.nan]))


def test_grad_check_reports_inf_on_non_finite_values():
    with np.errstate(invalid="ignore"):
        assert grad_check(lambda a: T.sum(T.sqrt(a)), [np.array([-1.0])]) == math.inf


def test_grad_check_restores_tensor_inputs():
    t = Tensor(np.array([0.3, -0.7]))
    before = t.data.copy()
    err = grad_check(lambda a: T.sum(T.exp(a)), [t])
    assert err < 1e-6
    np.testing.assert_array_equal(t.data, before)


def test_float32_default_dtype():
    T.set_default_dtype(np.float32)
    assert Tensor([1.0]).data.dtype == np.float32
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(x).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_broadcast_mul_gradient_property(a, b):
    assert grad_check(lambda x, y: T.sum(T.mul(T.mul(x, y), x)), [a, b]) < 1e-5


@given(arrays(np.float64, (2, 5), elements=finite))
def test_layer_norm_output_is_standardised(x):
    out = T.layer_norm(x).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-9)
