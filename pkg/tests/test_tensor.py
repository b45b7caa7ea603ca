import numpy as np
import pytest
from conftest import leaf, projected
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segdecode.gradcheck import check_gradients
from segdecode.ops import BatchNormState, ConvParams, batch_norm, conv2d, relu
from segdecode.tensor import Tape, Tensor, add, backward, mul, no_grad, precision, sum_all


def test_grad_of_sum_is_ones():
    x = leaf(np.random.default_rng(0).standard_normal((2, 3, 4, 5)))
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4, 5)))


def test_grad_of_sum_of_squares():
    x = leaf([[[[2.0, -3.0]]]])
    backward(sum_all(mul(x, x)))
    np.testing.assert_array_equal(x.grad, [[[[4.0, -6.0]]]])


def test_composite_graph_matches_finite_differences(rng):
    x = leaf(rng.standard_normal((2, 2, 6, 6)))
    w = leaf(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    bn = BatchNormState.create(3)

    def f():
        h = conv2d(x, ConvParams(w, padding=1))
        h = relu(batch_norm(h, bn, "train"))
        return projected(add(h, mul(h, h)))

    assert check_gradients(f, [x, w, bn.scale, bn.shift]) < 1e-4


def test_shared_tensor_gradients_accumulate():
    x = leaf(np.arange(6.0).reshape(1, 1, 2, 3))
    backward(add(sum_all(x), sum_all(x)))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 3), 2.0))


def test_add_examples():
    a = leaf([[[[1.0, 2.0]]]])
    b = leaf([[[[3.0, 4.0]]]])
    np.testing.assert_array_equal(add(a, b).data, [[[[4.0, 6.0]]]])
    np.testing.assert_array_equal(add(a, Tensor(np.zeros((1, 1, 1, 2)))).data, a.data)
    backward(sum_all(add(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones((1, 1, 1, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((1, 1, 1, 2)))


def test_add_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 1, 2, 2\).*\(1, 1, 2, 3\)"):
        add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


def test_sum_all_examples(rng):
    assert sum_all(Tensor(np.zeros((2, 3, 4, 4)))).item() == 0
    assert sum_all(Tensor(np.ones((1, 1, 2, 2)))).item() == 4
    x = rng.standard_normal((2, 3, 5, 7))
    acc = 0.0
    for v in x.reshape(-1):
        acc += float(v)
    assert abs(sum_all(Tensor(x)).item() - acc) <= 1e-9 * max(1.0, abs(acc))
    assert sum_all(Tensor(x)).shape == (1, 1, 1, 1)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        backward(add(x, x))


def test_backward_rejects_detached_loss():
    loss = sum_all(Tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(ValueError, match="detached"):
        backward(loss)


def test_tensor_invariants():
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 0, 2, 2)))
    t = Tensor(np.ones((2, 3, 4, 5)))
    assert t.data.size == 2 * 3 * 4 * 5
    y = add(t, t)
    assert not y.requires_grad and y.is_leaf
    x = leaf(np.ones((1, 1, 1, 2)))
    y = add(x, Tensor(np.ones((1, 1, 1, 2))))
    assert y.requires_grad and not y.is_leaf


def test_tape_is_topologically_ordered(rng):
    x = leaf(rng.standard_normal((1, 1, 2, 2)))
    y = mul(x, x)
    z = add(y, x)
    loss = sum_all(add(z, y))
    tape = Tape.from_output(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert tape.nodes[-1] is loss


def test_every_leaf_gradient_matches_value_shape(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    w = leaf(rng.standard_normal((5, 3, 3, 3)))
    backward(projected(conv2d(x, ConvParams(w, padding=1))))
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


def test_replay_is_bit_identical():
    def run():
        r = np.random.default_rng(7)
        x = leaf(r.standard_normal((2, 2, 6, 6)))
        w = leaf(r.standard_normal((4, 2, 3, 3)))
        out = relu(conv2d(x, ConvParams(w, padding=1)))
        loss = projected(out, seed=3)
        backward(loss)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_no_grad_records_nothing():
    x = leaf(np.ones((1, 1, 2, 2)))
    with no_grad():
        y = add(x, x)
    assert not y.requires_grad


def test_precision_context_sets_default_dtype():
    with precision(np.float32):
        assert Tensor([[[[1, 2]]]]).dtype == np.float32
    assert Tensor([[[[1, 2]]]]).dtype == np.float64


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-1e3, 1e3)))
def test_add_is_elementwise_and_routes_gradient(a, b):
    ta, tb = leaf(a), leaf(b)
    out = add(ta, tb)
    np.testing.assert_array_equal(out.data, a + b)
    backward(sum_all(out))
    np.testing.assert_array_equal(ta.grad, np.ones_like(a))
    np.testing.assert_array_equal(tb.grad, np.ones_like(b))
