import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlscl.autodiff import Adam, ContractError, NumericError, ShapeError, Tensor, backward, no_grad, ops
from fedlscl.autodiff import blob

from conftest import check_grads

FD_SETTINGS = settings(max_examples=6, deadline=None)
dims = st.integers(min_value=1, max_value=4)
seeds = st.integers(min_value=0, max_value=2**31 - 1)


def leaf(rng, *shape, shift=0.0):
    return Tensor(rng.normal(size=shape) + shift, requires_grad=True)


def probe(fn, rng):
    """Scalar ``sum(fn() * R)`` for one fixed random R, so every output entry matters."""
    R = None

    def loss():
        nonlocal R
        out = fn()
        if R is None:
            R = Tensor(rng.normal(size=out.shape))
        return ops.sum(ops.mul(out, R))
    return loss


# -- finite-difference checks, one per primitive, over random shapes ------------

@FD_SETTINGS
@given(seeds, dims, dims, dims)
def test_fd_elementwise_binary(seed, a, b, c):
    rng = np.random.default_rng(seed)
    x, y = leaf(rng, a, b, c), leaf(rng, a, b, c)
    z = leaf(rng, b, c)  # leading-dimension broadcast
    for fn in (lambda: ops.add(x, z), lambda: ops.sub(z, y), lambda: ops.mul(x, y), lambda: ops.mul(z, x)):
        assert check_grads(probe(fn, rng), [x, y, z]) < 1e-4


@FD_SETTINGS
@given(seeds, dims, dims, dims)
def test_fd_matmul_and_bmm(seed, n, k, m):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, n, k), leaf(rng, k, m)
    assert check_grads(probe(lambda: ops.matmul(a, b), rng), [a, b]) < 1e-4
    a3, b3 = leaf(rng, 2, n, k), leaf(rng, 2, k, m)
    assert check_grads(probe(lambda: ops.bmm(a3, b3), rng), [a3, b3]) < 1e-4
    assert check_grads(probe(lambda: ops.matmul(a3, b), rng), [a3, b]) < 1e-4


@FD_SETTINGS
@given(seeds, dims, dims)
def test_fd_activations(seed, n, m):
    rng = np.random.default_rng(seed)
    x = leaf(rng, n, m)
    # keep relu inputs away from the kink
    x.data += np.sign(x.data) * 0.1
    for fn in (ops.relu, ops.gelu, ops.tanh, ops.softmax, ops.log_softmax):
        assert check_grads(probe(lambda: fn(x), rng), [x]) < 1e-4, fn.__name__


@FD_SETTINGS
@given(seeds, dims, st.integers(min_value=2, max_value=6))
def test_fd_layernorm(seed, n, d):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(rng, n, d), leaf(rng, d, shift=1.0), leaf(rng, d)
    assert check_grads(probe(lambda: ops.layernorm(x, g, b), rng), [x, g, b]) < 1e-4


@FD_SETTINGS
@given(seeds, dims, dims, dims)
def test_fd_reductions_and_shapes(seed, a, b, c):
    rng = np.random.default_rng(seed)
    x = leaf(rng, a, b, c)
    y = leaf(rng, a, b, c)
    fns = [
        lambda: ops.sum(x, axis=1),
        lambda: ops.mean(x, axis=-1, keepdims=True),
        lambda: ops.mean(x),
        lambda: ops.reshape(x, (a * b, c)),
        lambda: ops.transpose(x, (2, 0, 1)),
        lambda: ops.swapaxes(x, 0, 2),
        lambda: ops.getitem(x, (slice(None), 0)),
        lambda: ops.concat([x, y], axis=1),
        lambda: ops.take(x, np.array([[0, c - 1], [c - 1, 0]]), axis=2),
    ]
    for fn in fns:
        assert check_grads(probe(fn, rng), [x, y]) < 1e-4


@FD_SETTINGS
@given(seeds, st.integers(min_value=1, max_value=6), st.integers(min_value=2, max_value=6))
def test_fd_losses(seed, n, k):
    rng = np.random.default_rng(seed)
    logits = leaf(rng, n, k)
    targets = rng.integers(0, k, size=n)
    assert check_grads(lambda: ops.cross_entropy(logits, targets), [logits]) < 1e-4
    assert check_grads(probe(lambda: ops.cross_entropy(logits, targets, reduction="none"), rng), [logits]) < 1e-4
    a, b = leaf(rng, n, k), leaf(rng, n, k)
    assert check_grads(probe(lambda: ops.sq_l2(a, b), rng), [a, b]) < 1e-4


# -- worked examples -----------------------------------------------------------

def test_identity_matmul():
    A = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_cross_entropy_softmax_chain_4x5():
    rng = np.random.default_rng(3)
    logits = leaf(rng, 4, 5)
    y = np.array([0, 4, 2, 2])
    assert check_grads(lambda: ops.cross_entropy(ops.log_softmax(ops.softmax(logits)), y), [logits]) < 1e-4


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(6, 5)))
    w1, b1, w2, b2 = leaf(rng, 5, 7), leaf(rng, 7), leaf(rng, 7, 3), leaf(rng, 3)
    y = rng.integers(0, 3, size=6)

    def loss():
        h = ops.tanh(ops.matmul(x, w1) + b1)
        return ops.cross_entropy(ops.matmul(h, w2) + b2, y)
    assert check_grads(loss, [w1, b1, w2, b2]) < 1e-4


def test_constant_root_gives_zero_grads():
    x = Tensor(np.ones(3), requires_grad=True)
    ops.mul(x, 2.0)
    backward(Tensor(5.0))
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_sum_of_leaf_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_non_scalar_root_is_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(ops.mul(x, 2.0))


def test_accumulation_is_additive():
    rng = np.random.default_rng(5)
    x = leaf(rng, 4, 3)

    def l1():
        return ops.sum(ops.tanh(x))

    def l2():
        return ops.mean(ops.mul(x, x))
    backward(ops.add(l1(), l2()))
    joint = x.grad.copy()
    x.grad = None
    backward(l1())
    backward(l2())
    np.testing.assert_allclose(x.grad, joint, rtol=0, atol=1e-14)


def test_deterministic_replay():
    def run():
        rng = np.random.default_rng(11)
        w = leaf(rng, 4, 4)
        opt = Adam([w], lr=0.01)
        for _ in range(5):
            backward(ops.sum(ops.gelu(ops.matmul(w, w))))
            opt.step()
        return w.data
    assert np.array_equal(run(), run())


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 2)" in msg


def test_trailing_broadcast_rejected():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


def test_scalar_broadcast_allowed():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    s = Tensor(2.0, requires_grad=True)
    backward(ops.sum(ops.mul(x, s)))
    assert s.grad == pytest.approx(6.0)


def test_non_finite_output_is_numeric_error():
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        ops.mul(Tensor([1e300]), Tensor([1e300]))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.mul(x, 3.0)
    assert not y.requires_grad


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    Adam([p], lr=0.1).step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(1e-5, 1.0))
def test_adam_first_step_bounded_by_lr(g, lr):
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([g])
    opt = Adam([p], lr=lr)
    opt.step()
    assert abs(p.data[0] - 0.5) <= lr * (1 + 1e-8)
    assert opt.step_count == 1


def test_adam_converges_on_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for step in range(200):
        opt.lr = 0.1 * 0.5 * (1 + np.cos(np.pi * step / 200))
        backward(ops.sum(ops.sq_l2(ops.reshape(p, (1, 3)), Tensor(target[None]))))
        opt.step()
    assert float(((p.data - target) ** 2).sum()) < 1e-4


def test_adam_missing_grad_is_contract_error():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        Adam([p]).step()


# -- tensor blobs ------------------------------------------------------------------

@given(st.lists(st.integers(0, 4), min_size=0, max_size=3), seeds)
def test_blob_round_trip(shape, seed):
    arr = np.random.default_rng(seed).normal(size=tuple(shape))
    buf = blob.to_bytes(arr)
    assert len(buf) == blob.header_nbytes(arr.ndim) + 8 * arr.size
    back, end = blob.from_bytes(buf)
    assert end == len(buf)
    assert back.shape == arr.shape and np.array_equal(back, arr)
    fh = io.BytesIO()
    blob.save(arr, fh)
    fh.seek(0)
    assert np.array_equal(blob.load(fh), arr)
