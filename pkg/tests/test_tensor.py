import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from peftkit import tensor as T
from peftkit.errors import NumericError, ShapeError, UsageError

import gradcheck


def t(x, **kw):
    return T.Tensor(np.asarray(x, dtype=np.float32), **kw)


class TestMatmul:
    def test_identity(self):
        a = [[1, 2], [3, 4]]
        np.testing.assert_array_equal(T.matmul(t(np.eye(2)), t(a)).data, a)

    def test_hand_product(self):
        out = T.matmul(t([[1, 2], [3, 4]]), t([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_zero_annihilates(self):
        out = T.matmul(t(np.zeros((3, 2))), t(np.arange(8).reshape(2, 4)))
        assert not out.data.any()

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_identity_associativity_bitwise(self):
        g = np.random.default_rng(0)
        A, B = t(g.normal(size=(5, 4))), t(g.normal(size=(4, 3)))
        left = T.matmul(T.matmul(A, t(np.eye(4))), B)
        assert np.array_equal(left.data, T.matmul(A, B).data)


class TestSoftmax:
    def test_constant_row(self):
        np.testing.assert_allclose(T.softmax(t([2.5, 2.5, 2.5])).data, [1 / 3] * 3, rtol=1e-6)

    def test_ln2(self):
        np.testing.assert_allclose(T.softmax(t([0.0, math.log(2)])).data, [1 / 3, 2 / 3], rtol=1e-6)

    def test_large_logits_stable(self):
        out = T.softmax(t([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            T.softmax(t([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (3, 7), elements=st.floats(-50, 50, width=32)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(T.Tensor(x)).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestGelu:
    def test_values(self):
        out = T.gelu(t([0.0, 1.0, -1.0])).data
        phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        np.testing.assert_allclose(out, [0.0, phi1, -(1 - phi1)], rtol=1e-6)

    def test_exact_erf_not_tanh(self):
        x = 1.5
        exact = x * 0.5 * (1 + math.erf(x / math.sqrt(2)))
        tanh = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        got = float(T.gelu(T.Tensor(np.array([x]), dtype=np.float64)).data[0])
        assert abs(got - exact) < 1e-12
        assert abs(got - tanh) > 1e-6


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = T.layer_norm(t([[4.0, 4.0, 4.0]]), t(np.ones(3)), t(np.zeros(3))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_two_values(self):
        out = T.layer_norm(t([1.0, 3.0]), t([1.0, 1.0]), t([0.0, 0.0])).data
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)

    def test_beta_recovery(self):
        beta = t([0.3, -0.7, 2.0])
        out = T.layer_norm(t(np.full((2, 3), 5.0)), t([9.0, 9.0, 9.0]), beta).data
        np.testing.assert_allclose(out, np.broadcast_to(beta.data, (2, 3)))


class TestBackward:
    def test_square(self):
        x = t([3.0], requires_grad=True)
        T.backward(T.sum_(x * x))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_non_scalar_loss(self):
        x = t([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            T.backward(x * 2.0)

    def test_unused_tensor_gets_zeros(self):
        x = t([1.0, 2.0], requires_grad=True)
        y = t([[5.0, 6.0]], requires_grad=True)
        T.backward(T.sum_(x * x), wrt=[x, y])
        np.testing.assert_array_equal(y.grad, np.zeros((1, 2)))

    def test_shared_node_accumulates(self):
        x = t([2.0], requires_grad=True)
        y = x * x
        T.backward(T.sum_(y + y))
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_tape_is_topological(self):
        x = t([1.0], requires_grad=True)
        y = T.gelu(x * 3.0)
        z = T.sum_(y + x)
        tape = T.GradTape(z)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]
        assert tape.nodes[-1] is z

    def test_no_grad_records_nothing(self):
        x = t([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_deep_chain_no_recursion_limit(self):
        x = t([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.backward(T.sum_(y))
        np.testing.assert_array_equal(x.grad, [1.0])


@pytest.mark.parametrize("name", sorted(gradcheck.CASES))
def test_gradient_float32(name):
    assert gradcheck.run_case(name, np.float32) <= 1e-3


@pytest.mark.parametrize("name", sorted(gradcheck.CASES))
def test_gradient_float64(name):
    assert gradcheck.run_case(name, np.float64) <= 1e-6


def test_gradcheck_catches_a_wrong_backward():
    def bad(a):
        return T.make_result(a.data**2, (a,), lambda g: (g * a.data,), "bad_square")

    x = np.random.default_rng(0).normal(size=(3, 3))
    assert gradcheck.check(bad, [x]) > 0.1


def test_serialization_roundtrip():
    x = t(np.arange(6).reshape(2, 3) / 7.0)
    buf = x.to_bytes()
    assert buf[:8] == (2).to_bytes(8, "little")
    assert len(buf) == 8 + 16 + 6 * 4
    y = T.Tensor.from_bytes(buf)
    assert y.shape == (2, 3) and y.to_bytes() == buf


def test_float32_default_and_float64_kept():
    assert t([1, 2]).dtype == np.float32
    assert T.Tensor(np.ones(2)).dtype == np.float64


def test_rng_determinism():
    a = T.rng(42).normal(size=5)
    b = T.rng(42).normal(size=5)
    assert np.array_equal(a, b)
