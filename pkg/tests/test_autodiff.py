import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stpredict.autodiff import (
    Adam, AdamState, ShapeError, Tensor, adam_step, add, affine, channels,
    check_gradients, concat, conv2d, flop_counter, gate_update, mean, mse, mul,
    no_grad, pool, relu, reshape, scale, sigmoid, sub, sum, tanh, tensor,
)

RNG = np.random.default_rng(1234)


def weighted(out, r):
    # sum(out * r) with a fixed random r so every output element matters
    return sum(mul(out, Tensor(r, dtype=np.float64)))


def fd(build, *shapes, seed=0):
    rng = np.random.default_rng(seed)
    arrs = [rng.standard_normal(s) for s in shapes]
    return max(check_gradients(build, arrs, h=1e-3))


# -- conv2d -----------------------------------------------------------------

def test_conv_counts_overlap(kernels):
    out = conv2d(tensor(np.ones((1, 1, 3, 3))), tensor(np.ones((1, 1, 3, 3)))).numpy()
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == out[0, 0, 2, 2] == 4
    assert out[0, 0, 0, 1] == 6


def test_conv_identity_kernel(kernels):
    x = RNG.standard_normal((2, 1, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(conv2d(tensor(x), tensor(np.ones((1, 1, 1, 1)))).numpy(), x)


@pytest.mark.parametrize("k", [1, 3, 7])
def test_conv_preserves_extent(kernels, k):
    out = conv2d(tensor(np.zeros((1, 2, 6, 4))), tensor(np.zeros((3, 2, k, k))))
    assert out.shape == (1, 3, 6, 4)


def test_conv_gradcheck_sum(kernels):
    err = fd(lambda t: sum(conv2d(t[0], t[1], t[2])), (2, 4, 5, 5), (3, 4, 3, 3), (3,))
    assert err < 1e-3


def test_conv_gradcheck_weighted(kernels):
    r = RNG.standard_normal((2, 3, 5, 5))
    assert fd(lambda t: weighted(conv2d(t[0], t[1]), r), (2, 4, 5, 5), (3, 4, 3, 3)) < 1e-3


def test_conv_shape_errors():
    with pytest.raises(ShapeError, match=r"\(1, 2, 3, 3\).*\(1, 4, 3, 3\)"):
        conv2d(tensor(np.zeros((1, 2, 3, 3))), tensor(np.zeros((1, 4, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(tensor(np.zeros((1, 2, 3, 3))), tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ShapeError):
        conv2d(tensor(np.zeros((2, 3, 3))), tensor(np.zeros((1, 2, 3, 3))))


# -- elementwise ------------------------------------------------------------

def test_activation_values():
    assert sigmoid(tensor(0.0)).item() == 0.5
    assert tanh(tensor(0.0)).item() == 0.0
    np.testing.assert_array_equal(relu(tensor([-1.0, 0.0, 2.0])).numpy(), [0, 0, 2])


@pytest.mark.parametrize("op", [sigmoid, tanh, lambda a: scale(a, -2.5)])
def test_unary_gradcheck(op):
    r = RNG.standard_normal((3, 3))
    assert fd(lambda t: weighted(op(t[0]), r), (3, 3)) < 1e-3


@pytest.mark.parametrize("op", [add, sub, mul])
def test_binary_gradcheck(op):
    r = RNG.standard_normal((3, 3))
    assert fd(lambda t: weighted(op(t[0], t[1]), r), (3, 3), (3, 3)) < 1e-3


def test_scalar_broadcast():
    x = tensor(np.arange(4.0).reshape(2, 2), requires_grad=True, dtype=np.float64)
    y = sub(3.0, mul(x, 2.0))
    np.testing.assert_array_equal(y.numpy(), 3 - 2 * np.arange(4.0).reshape(2, 2))
    sum(y).backward()
    np.testing.assert_array_equal(x.grad, -2 * np.ones((2, 2)))


def test_channelwise_multiply_gradcheck():
    r = RNG.standard_normal((2, 3, 4, 4))
    assert fd(lambda t: weighted(mul(t[0], t[1]), r), (2, 3, 4, 4), (2, 3, 1, 1)) < 1e-3


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        add(tensor(np.zeros((2, 3))), tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        mul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 2))))


def test_relu_gradcheck_off_kink():
    x = RNG.uniform(0.1, 1, size=(4, 4)) * RNG.choice([-1, 1], size=(4, 4))
    assert max(check_gradients(lambda t: sum(mul(relu(t[0]), t[0])), [x])) < 1e-3


# -- structural -------------------------------------------------------------

def test_concat_channels_reshape_gradcheck():
    r = RNG.standard_normal((2, 3, 2, 2))

    def build(t):
        c = concat([t[0], t[1]], axis=1)
        return weighted(channels(c, 1, 4), r) + sum(mul(reshape(c, (2, 20)), reshape(c, (2, 20))))
    assert fd(build, (2, 2, 2, 2), (2, 3, 2, 2)) < 1e-3


# -- pooling ----------------------------------------------------------------

def test_pool_examples():
    const = tensor(np.full((1, 2, 3, 3), 1.5))
    np.testing.assert_allclose(pool(const, "avg", "spatial").numpy(), np.full((1, 2, 1, 1), 1.5))
    x = tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
    assert pool(x, "max", "channel").numpy().item() == 3


def test_avg_pool_gradient_is_uniform():
    x = Tensor(RNG.standard_normal((2, 3, 4, 5)), requires_grad=True, dtype=np.float64)
    sum(pool(x, "avg", "spatial")).backward()
    np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 20))
    assert fd(lambda t: weighted(pool(t[0], "avg", "spatial"), np.ones((2, 3, 1, 1))), (2, 3, 4, 5)) < 1e-3
    r = RNG.standard_normal((2, 1, 4, 5))
    assert fd(lambda t: weighted(pool(t[0], "avg", "channel"), r), (2, 3, 4, 5)) < 1e-3


@pytest.mark.parametrize("axis", ["spatial", "channel"])
def test_max_pool_gradcheck_without_ties(axis):
    # distinct values spaced well beyond h keep the argmax fixed under perturbation
    x = RNG.permutation(np.arange(2 * 3 * 4 * 4, dtype=np.float64)).reshape(2, 3, 4, 4) * 0.1
    assert max(check_gradients(lambda t: sum(mul(pool(t[0], "max", axis), pool(t[0], "max", axis))), [x])) < 1e-3


def test_max_pool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
    sum(pool(x, "max", "spatial")).backward()
    np.testing.assert_array_equal(x.grad.reshape(-1), [1, 0, 0, 0])
    y = Tensor(np.ones((1, 3, 1, 1)), requires_grad=True, dtype=np.float64)
    sum(pool(y, "max", "channel")).backward()
    np.testing.assert_array_equal(y.grad.reshape(-1), [1, 0, 0])


def test_pool_errors():
    with pytest.raises(ShapeError):
        pool(tensor(np.zeros((1, 0, 2, 2))), "avg", "channel")
    with pytest.raises(ValueError):
        pool(tensor(np.zeros((1, 1, 2, 2))), "median", "spatial")
    with pytest.raises(ShapeError):
        pool(tensor(np.zeros((2, 2))), "avg", "spatial")


# -- affine -----------------------------------------------------------------

def test_affine_examples():
    x = RNG.standard_normal((3, 4))
    np.testing.assert_allclose(affine(tensor(x, dtype=np.float64), tensor(np.eye(4), dtype=np.float64),
                                      tensor(np.zeros(4), dtype=np.float64)).numpy(), x)
    b = np.array([1.0, -2.0])
    out = affine(tensor(x), tensor(np.zeros((2, 4))), tensor(b)).numpy()
    np.testing.assert_array_equal(out, np.tile(b, (3, 1)))


def test_affine_gradcheck():
    r = RNG.standard_normal((3, 2))
    assert fd(lambda t: weighted(affine(t[0], t[1], t[2]), r), (3, 4), (2, 4), (2,)) < 1e-3


def test_affine_shape_error():
    with pytest.raises(ShapeError):
        affine(tensor(np.zeros((3, 4))), tensor(np.zeros((2, 5))))


# -- fused gate, losses -----------------------------------------------------

def test_gate_update_gradcheck(kernels):
    r = RNG.standard_normal((2, 3, 4, 4))
    assert fd(lambda t: weighted(gate_update(t[0], t[1]), r), (2, 9, 4, 4), (2, 3, 4, 4)) < 1e-3
    with pytest.raises(ShapeError):
        gate_update(tensor(np.zeros((1, 8, 2, 2))), tensor(np.zeros((1, 3, 2, 2))))


def test_mse_and_mean():
    a, b = RNG.standard_normal((2, 3)), RNG.standard_normal((2, 3))
    np.testing.assert_allclose(mse(tensor(a, dtype=np.float64), tensor(b, dtype=np.float64)).item(),
                               np.mean((a - b) ** 2))
    assert fd(lambda t: mse(t[0], t[1]), (2, 3), (2, 3)) < 1e-3
    assert fd(lambda t: mean(mul(t[0], t[0])), (4, 2)) < 1e-3
    with pytest.raises(ShapeError):
        mse(tensor(np.zeros(3)), tensor(np.zeros(4)))


# -- backward ---------------------------------------------------------------

def test_backward_examples():
    x = Tensor(RNG.standard_normal((2, 3, 4)), requires_grad=True, dtype=np.float64)
    sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(x.shape))
    x.zero_grad()
    sum(mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_twice_doubles():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    loss = sum(tanh(conv2d(x, w)))
    loss.backward()
    once = w.grad.copy(), x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * once[0])
    np.testing.assert_array_equal(x.grad, 2 * once[1])


def test_backward_populates_every_leaf_and_shared_use():
    a = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    b = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    sum(add(mul(a, b), mul(a, a))).backward()
    assert a.grad.item() == pytest.approx(3 + 4)
    assert b.grad.item() == pytest.approx(2)


def test_backward_non_scalar():
    with pytest.raises(ShapeError):
        tensor(np.zeros(3), requires_grad=True).backward()


def test_no_grad_records_nothing():
    x = tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad


def test_too_many_axes():
    with pytest.raises(ShapeError):
        tensor(np.zeros((1,) * 6))


def test_flop_counter_conv():
    with flop_counter() as n:
        conv2d(tensor(np.zeros((1, 2, 4, 4))), tensor(np.zeros((3, 2, 3, 3))))
    assert n[0] == 2 * 2 * 9 * 3 * 16


def test_float32_is_default():
    assert tensor([1.0, 2.0]).dtype == np.float32
    assert sigmoid(tensor([1.0])).dtype == np.float32


# -- adam -------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = Tensor(RNG.standard_normal(5), requires_grad=True, dtype=np.float64)
    before = p.data.copy()
    state = AdamState()
    for _ in range(3):
        adam_step([p], [np.zeros(5)], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.step == 3


def test_adam_constant_gradient_moves_against_sign():
    p = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    state = AdamState(lr=0.01)
    trace = []
    for _ in range(50):
        adam_step([p], [np.array([0.3, -7.0])], state)
        trace.append(p.data.copy())
    trace = np.array(trace)
    assert np.all(np.diff(trace[:, 0]) < 0) and np.all(np.diff(trace[:, 1]) > 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e6, 1e6, allow_nan=False).filter(lambda v: abs(v) > 1e-6)))
def test_adam_first_step_bounded_by_lr(g):
    p = Tensor(np.zeros(6), requires_grad=True, dtype=np.float64)
    adam_step([p], [g], AdamState(lr=1e-3))
    assert np.all(np.abs(p.data) <= 1e-3 * (1 + 1e-8))
    assert np.all(np.sign(p.data) == -np.sign(g))


def test_adam_deterministic():
    g = RNG.standard_normal((3, 3)).astype(np.float32)
    outs = []
    for _ in range(2):
        p = Tensor(np.ones((3, 3)), requires_grad=True)
        s = AdamState()
        for _ in range(4):
            adam_step([p], [g], s)
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]


def test_adam_errors():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError, match="missing"):
        adam_step([p], [None], AdamState())
    with pytest.raises(ValueError):
        adam_step([p], [], AdamState())
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], AdamState())
    with pytest.raises(ValueError, match="no gradient"):
        Adam([p]).step()


def test_adam_optimizer_uses_grads():
    p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        sum(mul(p, p)).backward()
        opt.step()
    assert abs(p.data.item()) < 0.05


# -- properties -------------------------------------------------------------

small = arrays(np.float64, (2, 3), elements=st.floats(-3, 3))


@settings(max_examples=40, deadline=None)
@given(small, small)
def test_add_sub_inverse(a, b):
    np.testing.assert_allclose(sub(add(tensor(a, dtype=np.float64), tensor(b, dtype=np.float64)),
                                   tensor(b, dtype=np.float64)).numpy(), a, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(small)
def test_activation_ranges(a):
    s = sigmoid(tensor(a, dtype=np.float64)).numpy()
    t = tanh(tensor(a, dtype=np.float64)).numpy()
    assert np.all((s > 0) & (s < 1)) and np.all(np.abs(t) < 1)
