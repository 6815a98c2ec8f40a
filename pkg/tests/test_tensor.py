import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from far import tensor as T
from far.tensor import GradientError, ShapeError, Tensor


def fd_check(fn, x, h=1e-6, rel=1e-7, samples=None):
    """Central finite differences against the analytic gradient of fn(x).sum-like scalar."""
    x = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = fn(x)
    loss.backward()
    an = x.grad.ravel()
    flat = x.data.ravel()
    idxs = range(len(flat)) if samples is None else samples
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        lp = fn(Tensor(x.data)).item()
        flat[i] = orig - h
        lm = fn(Tensor(x.data)).item()
        flat[i] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(an[i] - fd) / max(1.0, abs(an[i])) <= rel, \
            f"coordinate {i}: analytic {an[i]} vs fd {fd}"


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1., 2.], [3., 4.]]))
    np.testing.assert_array_equal(out.data, [[1., 2.], [3., 4.]])


def test_matmul_hand():
    out = T.matmul(Tensor([[1., 2.]]), Tensor([[3.], [4.]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expect[i, j] += a[i, k] * b[k, j]
    out = T.matmul(Tensor(a), Tensor(b))
    assert np.abs(out.data - expect).max() < 1e-12


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_backward():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    T.tsum(T.matmul(a, b)).backward()
    g = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


# -- layer_norm -----------------------------------------------------------

def test_layer_norm_constant_row_collapses_to_beta():
    out = T.layer_norm(Tensor([[5., 5., 5., 5.]]), T.ones(4, "f64"),
                       T.zeros(4, "f64"))
    np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)


def test_layer_norm_already_normalized():
    out = T.layer_norm(Tensor([[1., -1.]]), T.ones(2, "f64"),
                       T.zeros(2, "f64"), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1., -1.]], atol=1e-6)


def test_layer_norm_output_statistics():
    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(4, 8))
    out = T.layer_norm(Tensor(x), T.ones(8, "f64"), T.zeros(8, "f64"),
                       eps=1e-5).data
    assert np.abs(out.mean(axis=1)).max() <= 1e-6
    assert np.abs(out.var(axis=1) - 1.0).max() <= 1e-3


def test_layer_norm_dim_mismatch():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 4))), T.ones(3, "f64"),
                     T.zeros(3, "f64"))


def test_layer_norm_eps_positive():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.zeros((1, 2))), T.ones(2), T.zeros(2), eps=0.0)


def test_layer_norm_backward_fd():
    rng = np.random.default_rng(3)
    g = Tensor(rng.normal(size=5) + 1.0, requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)

    def fn(x):
        return T.tsum(T.square(T.layer_norm(x, g, b)))

    fd_check(fn, rng.normal(size=(3, 5)), rel=1e-6)


# -- softmax ----------------------------------------------------------------

def test_softmax_symmetry():
    np.testing.assert_allclose(T.softmax(Tensor([0., 0.])).data, [0.5, 0.5])


def test_softmax_shift_invariance_no_overflow():
    out = T.softmax(Tensor([1000., 1000.])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_closed_form():
    out = T.softmax(Tensor([0., math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_probability_vector(vals):
    out = T.softmax(Tensor(np.array(vals))).data
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) <= 1e-6


# -- pointwise suite ----------------------------------------------------------

def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_cross_entropy_saturated_match():
    logits = Tensor([[60.0, 0.0, 0.0]])
    assert T.cross_entropy(logits, [0]).item() < 1e-20


def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor([[0.0, 0.0, 0.0, 0.0]]), [2])
    np.testing.assert_allclose(loss.item(), math.log(4.0), rtol=1e-12)


def test_tanh_backward_fd():
    x = Tensor(np.array(0.3), requires_grad=True)
    T.tanh(x).backward()
    h = 1e-6
    fd = (math.tanh(0.3 + h) - math.tanh(0.3 - h)) / (2 * h)
    assert abs(x.grad.item() - fd) / max(1.0, abs(x.grad.item())) <= 1e-7


@pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.gelu, T.exp, T.sqrt,
                                T.square, T.log])
def test_pointwise_backward_fd(op):
    rng = np.random.default_rng(4)
    x = rng.uniform(0.2, 1.5, size=6)  # positive domain covers log/sqrt
    fd_check(lambda t: T.tsum(op(t)), x, rel=1e-6)


def test_cross_entropy_backward_fd():
    rng = np.random.default_rng(5)
    labels = [1, 0, 2]

    def fn(x):
        return T.cross_entropy(x, labels)

    fd_check(fn, rng.normal(size=(3, 4)), rel=1e-6)


# -- backward contract --------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_product_rule():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(3.0, requires_grad=True)
    (x * y).backward()
    assert x.grad.item() == 3.0
    assert y.grad.item() == 2.0


def test_backward_twice_errors():
    x = Tensor(1.0, requires_grad=True)
    loss = x * x
    loss.backward()
    with pytest.raises(GradientError):
        loss.backward()


def test_backward_requires_scalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(GradientError):
        (x * 2).backward()


def test_frozen_leaf_receives_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    frozen = Tensor(np.ones(3), requires_grad=False)
    T.tsum(x * frozen).backward()
    assert x.grad is not None
    assert frozen.grad is None


def test_shared_node_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = x * x + x * x  # x used twice via two products
    y.backward()
    assert x.grad.item() == 12.0


# -- determinism and shape algebra ---------------------------------------------

def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        loss = T.tsum(T.square(T.softmax(T.matmul(T.tanh(x), w), axis=-1)))
        loss.backward()
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3))
def test_concat_split_identity(sections, rows):
    rng = np.random.default_rng(rows * 10 + sections)
    x = Tensor(rng.normal(size=(rows, 6 * sections)))
    parts = T.split(x, sections, axis=1)
    back = T.concat(parts, axis=1)
    assert np.array_equal(back.data, x.data)


def test_split_indivisible_errors():
    with pytest.raises(ShapeError):
        T.split(Tensor(np.zeros((2, 5))), 2, axis=1)


def test_transpose_reshape_roundtrip_grad():
    rng = np.random.default_rng(12)

    def fn(x):
        y = T.transpose(T.reshape(x, (2, 3, 4)), (2, 0, 1))
        return T.tsum(T.square(y))

    fd_check(fn, rng.normal(size=24), rel=1e-6, samples=range(0, 24, 3))


def test_primitive_gradient_property_sweep():
    """Every primitive within rel 1e-5 of central FD at random points (f64)."""
    rng = np.random.default_rng(13)
    w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    gam = Tensor(rng.normal(size=5) + 1.0, requires_grad=True)
    bet = Tensor(rng.normal(size=5), requires_grad=True)

    def composite(x):
        y = T.matmul(x, w)
        y = T.layer_norm(y, gam, bet)
        y = T.softmax(y, axis=-1)
        y = T.sigmoid(y) + T.tanh(y) * T.gelu(y)
        z = T.concat(T.split(y, 5, axis=1)[::-1], axis=1)
        return T.mean(T.square(z))

    x0 = rng.normal(size=(10, 5))
    idx = rng.choice(50, size=50, replace=False)
    fd_check(composite, x0, rel=1e-5, samples=idx)
