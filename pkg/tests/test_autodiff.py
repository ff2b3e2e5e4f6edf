import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raterseg.autodiff import (OP_KINDS, ContractError, ShapeError, Tape, Tensor, backward,
                               finite_diff_check)


def leaf(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_add_elementwise():
    out = Tape().add(Tensor([1, 2]), Tensor([3, 4]))
    np.testing.assert_array_equal(out.data, [4, 6])


def test_identity_kernel_conv_is_identity():
    img = np.random.default_rng(0).random((1, 1, 7, 5)).astype(np.float32)
    out = Tape().conv2d(Tensor(img), Tensor(np.ones((1, 1, 1, 1))), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, img)


def test_sigmoid_at_zero():
    assert Tape().sigmoid(Tensor([0.0])).data[0] == 0.5


def test_square_gradient():
    x = leaf(3.0)
    tape = Tape()
    grads = tape.backward(tape.mul(x, x))
    assert grads[x] == pytest.approx(6.0)


@pytest.mark.parametrize("shape", [(3,), (2, 4), (2, 3, 4)])
def test_sum_gives_ones(shape):
    x = leaf(np.random.default_rng(1).random(shape))
    tape = Tape()
    grads = tape.backward(tape.sum(x))
    np.testing.assert_array_equal(grads[x], np.ones(shape))


def test_conv_relu_mean_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = leaf(rng.uniform(-1, 1, (1, 2, 6, 6)))
    k = leaf(rng.uniform(-1, 1, (3, 2, 3, 3)))
    err = finite_diff_check(lambda t, x, k: t.mean(t.relu(t.conv2d(x, k, padding=1))), [x, k])
    assert err < 1e-4


def test_non_scalar_loss_rejected():
    tape = Tape()
    y = tape.add(leaf([1.0, 2.0]), leaf([1.0, 1.0]))
    with pytest.raises(ContractError):
        tape.backward(y)


def test_tape_consumed_once():
    x = leaf(2.0)
    tape = Tape()
    y = tape.mul(x, x)
    tape.backward(y)
    with pytest.raises(ContractError):
        tape.backward(y)
    with pytest.raises(ContractError):
        tape.exp(x)


def test_unreachable_leaves_absent():
    x, unused = leaf(1.0), leaf(5.0)
    tape = Tape()
    tape.exp(unused)
    grads = tape.backward(tape.mul(x, x))
    assert x in grads and unused not in grads


def test_constants_get_no_gradient():
    x, c = leaf(2.0), Tensor(3.0)
    tape = Tape()
    grads = tape.backward(tape.mul(x, c))
    assert grads[x] == pytest.approx(3.0)
    assert c not in grads


def test_module_level_backward():
    x = leaf([1.0, 2.0])
    tape = Tape()
    grads = backward(tape.sum(tape.exp(x)))
    np.testing.assert_allclose(grads[x], np.exp([1.0, 2.0]))


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5


def test_shape_errors_name_the_op():
    tape = Tape()
    with pytest.raises(ShapeError, match="add.*\\(2,\\).*\\(3,\\)"):
        tape.add(Tensor([1, 2]), Tensor([1, 2, 3]))
    with pytest.raises(ShapeError, match="matmul"):
        tape.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        tape.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="broadcast"):
        tape.broadcast(Tensor(np.ones((2, 3))), (4, 3, 2))
    with pytest.raises(ShapeError, match="concat"):
        tape.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)


def test_trailing_broadcast_only():
    tape = Tape()
    out = tape.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data[1], [1, 2, 3])
    with pytest.raises(ShapeError):
        tape.add(Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0, 3.0]))


def test_nan_propagates_without_error():
    out = Tape().log(Tensor([-1.0, 0.0]))
    assert np.isnan(out.data[0]) and np.isneginf(out.data[1])


def test_finite_diff_contract():
    x = leaf(3.0)
    assert finite_diff_check(lambda t, x: t.mul(x, x), [x], 1e-4) < 1e-6
    assert finite_diff_check(lambda t, x: t.scale(t.sum(x), 0.0), [x], 1e-4) == 0.0
    with pytest.raises(ContractError):
        finite_diff_check(lambda t, x: t.concat([x, x]), [leaf([1.0])], 1e-4)
    with pytest.raises(ContractError):
        finite_diff_check(lambda t, x: t.mul(x, x), [x], 0.1)


# one scalar-valued wrapper per op kind; inputs drawn in [-1, 1]
def _op_cases(rng):
    u = lambda *s: leaf(rng.uniform(-1, 1, s))  # noqa: E731
    pos = lambda *s: leaf(rng.uniform(0.5, 1.5, s))  # noqa: E731
    return {
        "add": (lambda t, a, b: t.sum(t.mul(t.add(a, b), t.add(a, b))), [u(3, 4), u(4)]),
        "sub": (lambda t, a, b: t.sum(t.mul(t.sub(a, b), t.sub(a, b))), [u(3, 4), u(3, 4)]),
        "mul": (lambda t, a, b: t.sum(t.mul(a, b)), [u(2, 3, 4), u(3, 4)]),
        "scale": (lambda t, a: t.sum(t.mul(t.scale(a, -2.5), a)), [u(5)]),
        "matmul": (lambda t, a, b: t.sum(t.sigmoid(t.matmul(a, b))), [u(3, 4), u(4, 2)]),
        "conv2d": (lambda t, x, w, b: t.sum(t.sigmoid(t.conv2d(x, w, b, stride=2, padding=1))),
                   [u(2, 2, 5, 5), u(3, 2, 3, 3), u(3)]),
        "relu": (lambda t, a: t.sum(t.mul(t.relu(a), a)), [u(4, 4)]),
        "sigmoid": (lambda t, a: t.sum(t.sigmoid(a)), [u(6)]),
        "softplus": (lambda t, a: t.sum(t.softplus(t.scale(a, 3.0))), [u(6)]),
        "exp": (lambda t, a: t.sum(t.exp(a)), [u(6)]),
        "log": (lambda t, a: t.sum(t.log(a)), [pos(6)]),
        "sum": (lambda t, a: t.sum(t.exp(t.sum(a, axis=1))), [u(3, 4)]),
        "mean": (lambda t, a: t.sum(t.exp(t.mean(a, axis=(0, 2)))), [u(2, 3, 4)]),
        "concat": (lambda t, a, b: t.sum(t.exp(t.concat([a, b], axis=1))), [u(2, 3), u(2, 2)]),
        "slice": (lambda t, a: t.sum(t.exp(t.slice(a, (slice(0, 2), 1)))), [u(3, 4)]),
        "broadcast": (lambda t, a: t.sum(t.exp(t.broadcast(a, (2, 3, 4)))), [u(3, 1)]),
        "reshape": (lambda t, a: t.sum(t.mul(t.reshape(a, (6, 2)), leaf(np.arange(12.).reshape(6, 2), False))),
                    [u(3, 4)]),
    }


@pytest.mark.parametrize("kind", OP_KINDS)
def test_every_op_kind_passes_gradient_check(kind):
    fn, params = _op_cases(np.random.default_rng(7))[kind]
    assert finite_diff_check(fn, params, 1e-6) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(1, 2), st.integers(0, 1),
       st.integers(0, 2**31 - 1))
def test_conv2d_gradient_random_shapes(b, c, hw, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.uniform(-1, 1, (b, c, hw, hw)))
    w = leaf(rng.uniform(-1, 1, (2, c, 3, 3)))
    err = finite_diff_check(lambda t, x, w: t.sum(t.sigmoid(t.conv2d(x, w, stride=stride, padding=pad))), [x, w])
    assert err < 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.random((2, 3, 6, 7))
    w = rng.random((4, 3, 3, 3))
    out = Tape().conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_upsample2x_nearest():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = Tape().upsample2x(x).data[0, 0]
    np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_linearity_of_gradients():
    rng = np.random.default_rng(4)
    x = leaf(rng.uniform(-1, 1, (3, 3)))
    f = lambda t: t.sum(t.sigmoid(x))  # noqa: E731
    g = lambda t: t.sum(t.mul(x, t.exp(x)))  # noqa: E731
    a, b = 0.7, -1.3

    def grad_of(build):
        tape = Tape()
        return tape.backward(build(tape))[x]

    combined = grad_of(lambda t: t.add(t.scale(f(t), a), t.scale(g(t), b)))
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-6)


def test_gradients_are_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.random((2, 2, 8, 8)), dtype=np.float32)
    w = Tensor(rng.random((4, 2, 3, 3)), requires_grad=True, dtype=np.float32)

    def run():
        tape = Tape()
        return tape.backward(tape.mean(tape.relu(tape.conv2d(x, w, padding=1))))[w]

    assert run().tobytes() == run().tobytes()


def test_float32_default_and_f64_reductions():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    big = Tensor(np.full(10**6, 0.1, dtype=np.float32))
    total = Tape().sum(big).item()
    assert abs(total - 1e5) < 1.0   # naive float32 accumulation drifts further
