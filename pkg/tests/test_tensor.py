import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from brnn import tensor as tn
from brnn.errors import ContractError, DimensionError, NumericError, TargetIndexError
from brnn.tensor import Tape, Tensor

from helpers import autodiff, central_difference, relative_error


def _check(f, arrays, tol=1e-4):
    """Autodiff vs central differences in float64."""
    with tn.precision(np.float64):
        _, analytic = autodiff(f, arrays)

        def numeric(*xs):
            with tn.no_grad():
                return float(f(*[Tensor(x) for x in xs]).data)

        expected = central_difference(numeric, arrays)
    for a, e in zip(analytic, expected):
        assert relative_error(a, e) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32

    def test_precision_context_restores(self):
        with tn.precision(np.float64):
            assert Tensor(1.0).data.dtype == np.float64
        assert Tensor(1.0).data.dtype == np.float32

    def test_scalar_broadcast_only(self):
        a = Tensor(np.ones((2, 3)))
        assert (a * 2.0).shape == (2, 3)
        with pytest.raises(DimensionError):
            tn.add(a, Tensor(np.ones(3)))

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NumericError):
            tn.exp(Tensor([1000.0]))

    def test_division_by_zero_raises(self):
        with pytest.raises(NumericError):
            tn.div(Tensor([1.0]), Tensor([0.0]))


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(2, 3))
        out = tn.matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_allclose(out.data, b, rtol=1e-6)

    def test_zero(self, rng):
        out = tn.matmul(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros((4, 2))))
        assert np.all(out.data == 0)

    def test_gradient_matches_finite_differences(self, rng):
        a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
        w = rng.uniform(-1, 1, (3, 2))
        _check(lambda x, y: tn.sum_all(tn.matmul(x, y) * Tensor(w)), [a, b])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_known_values(self):
        assert float(tn.sigmoid(Tensor(0.0)).data) == 0.5
        assert float(tn.tanh(Tensor(0.0)).data) == 0.0
        assert float(tn.softplus(Tensor(0.0)).data) == pytest.approx(math.log(2), abs=1e-7)

    def test_dispatcher(self):
        x = Tensor([0.5, -0.25])
        np.testing.assert_array_equal(tn.elementwise("tanh", x).data, tn.tanh(x).data)
        np.testing.assert_array_equal(tn.elementwise("mul", x, x).data, (x * x).data)
        with pytest.raises(ContractError):
            tn.elementwise("cosh", x)

    def test_log_of_nonpositive(self):
        with pytest.raises(NumericError):
            tn.log(Tensor([1.0, 0.0]))
        with pytest.raises(NumericError):
            tn.log(Tensor([-1.0]))

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "exp", "softplus", "neg", "square"])
    def test_unary_gradients(self, kind, rng):
        x = rng.uniform(-1, 1, (3, 4))
        w = rng.uniform(-1, 1, (3, 4))
        _check(lambda a: tn.sum_all(tn.elementwise(kind, a) * Tensor(w)), [x], tol=1e-3)

    def test_log_gradient(self, rng):
        x = rng.uniform(0.5, 1.5, (5,))
        _check(lambda a: tn.sum_all(tn.log(a)), [x], tol=1e-3)

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, kind, rng):
        a = rng.uniform(-1, 1, (2, 3))
        b = rng.uniform(0.5, 1.0, (2, 3))
        w = rng.uniform(-1, 1, (2, 3))
        _check(lambda x, y: tn.sum_all(tn.elementwise(kind, x, y) * Tensor(w)), [a, b], tol=1e-3)

    def test_scalar_operand_gradient(self, rng):
        a = rng.uniform(-1, 1, (4,))
        _check(lambda x, s: tn.sum_all(x * s), [a, np.array(0.3)])


class TestStructural:
    def test_concat_slice_gradients(self, rng):
        a, b = rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 2))
        w = rng.uniform(-1, 1, (2, 4))

        def f(x, y):
            z = tn.concat([x, y], axis=1)
            return tn.sum_all(tn.slice_axis(z, 1, 1, 5) * Tensor(w))

        _check(f, [a, b])

    def test_take_rows_accumulates_repeats(self, rng):
        table = rng.uniform(-1, 1, (4, 3))
        ids = np.array([1, 3, 1, 1])
        w = rng.uniform(-1, 1, (4, 3))
        _check(lambda t: tn.sum_all(tn.take_rows(t, ids) * Tensor(w)), [table])

    def test_take_rows_out_of_range(self):
        with pytest.raises(TargetIndexError):
            tn.take_rows(Tensor(np.ones((3, 2))), [3])

    def test_reductions_and_reshape(self, rng):
        a = rng.uniform(-1, 1, (3, 4))
        w = rng.uniform(-1, 1, (4, 5))

        def f(x):
            s = tn.expand(tn.sum_axis(x, 0), 1, 5)
            return tn.sum_all(tn.reshape(tn.transpose(x), (2, 6)) * 0.5) + tn.sum_all(s * Tensor(w))

        _check(f, [a])

    def test_pick_place(self, rng):
        a = rng.uniform(-1, 1, (3, 4))
        idx = np.array([0, 3, 2])
        _check(lambda x: tn.sum_all(tn.square(tn.pick(x, idx))), [a])
        placed = tn.place(Tensor([1.0, 2.0, 3.0]), idx, 4)
        np.testing.assert_array_equal(tn.pick(placed, idx).data, [1.0, 2.0, 3.0])


class TestLogSoftmaxNll:
    def test_uniform(self):
        loss = tn.log_softmax_nll(Tensor(np.zeros((1, 10))), [3])
        assert float(loss.data) == pytest.approx(math.log(10), abs=1e-6)

    def test_peaked(self):
        logits = np.zeros((2, 5))
        logits[0, 2] = logits[1, 4] = 60.0
        assert float(tn.log_softmax_nll(Tensor(logits), [2, 4]).data) < 1e-12

    def test_stable_for_large_logits(self):
        loss = tn.log_softmax_nll(Tensor([[1e4, 0.0]]), [1])
        assert float(loss.data) == pytest.approx(1e4, rel=1e-6)

    def test_gradient(self, rng):
        logits = rng.uniform(-1, 1, (4, 7))
        targets = np.array([0, 6, 3, 3])
        _check(lambda x: tn.log_softmax_nll(x, targets), [logits])

    def test_out_of_range_target(self):
        with pytest.raises(TargetIndexError):
            tn.log_softmax_nll(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(TargetIndexError):
            tn.log_softmax_nll(Tensor(np.zeros((1, 3))), [-1])


class TestBackward:
    def test_sum_gives_ones(self):
        theta = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            loss = tn.sum_all(theta)
            grads = tn.backward(loss)
        np.testing.assert_array_equal(grads[theta].data, np.ones((2, 3)))

    def test_untouched_leaf_gets_zero(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        p = Tensor([[3.0]], requires_grad=True)
        with Tape():
            loss = tn.sum_all(a * a)
            grads = tn.backward(loss, [a, p])
        np.testing.assert_array_equal(grads[p].data, [[0.0]])

    def test_non_scalar_loss(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            out = a * 2.0
            with pytest.raises(ContractError):
                tn.backward(out)

    def test_loss_from_other_tape(self):
        a = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = tn.sum_all(a)
        with Tape():
            with pytest.raises(ContractError):
                tn.backward(loss)

    def test_accumulation_matches_single_path(self, rng):
        x0 = rng.uniform(-1, 1, (3,))
        with tn.precision(np.float64):
            _, (twice,) = autodiff(lambda x: tn.sum_all(tn.mul(x, x) + x), [x0])
            _, (single,) = autodiff(lambda x: tn.sum_all(tn.square(x) + x), [x0])
        np.testing.assert_allclose(twice, single, rtol=1e-12)
        np.testing.assert_allclose(twice, 2 * x0 + 1, rtol=1e-12)

    def test_reverse_order_visit(self):
        a = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            b = tn.exp(a)
            c = tn.tanh(b)
            tn.sum_all(c)
        assert tape.ops == ["exp", "tanh", "sum"]

    def test_second_order(self):
        with tn.precision(np.float64):
            x = Tensor(np.array([0.7, -1.3]), requires_grad=True)
            with Tape() as tape:
                y = tn.sum_all(x * x * x)
                (g,) = tape.gradient(y, [x], create_graph=True)
                z = tn.sum_all(g)
            (h,) = tape.gradient(z, [x])
        np.testing.assert_allclose(g.data, 3 * x.data ** 2)
        np.testing.assert_allclose(h.data, 6 * x.data)

    def test_determinism(self, rng):
        a0, b0 = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
        runs = [autodiff(lambda a, b: tn.sum_all(tn.tanh(tn.matmul(a, b))), [a0, b0])
                for _ in range(2)]
        assert runs[0][0] == runs[1][0]
        for g1, g2 in zip(runs[0][1], runs[1][1]):
            assert np.array_equal(g1, g2)


finite = st.floats(-10, 10, allow_nan=False, width=32)


class TestProperties:
    @given(arrays(np.float32, (5,), elements=finite), arrays(np.float32, (5,), elements=finite))
    @settings(max_examples=50, deadline=None)
    def test_add_commutes(self, a, b):
        assert np.array_equal(tn.add(Tensor(a), Tensor(b)).data, tn.add(Tensor(b), Tensor(a)).data)

    @given(arrays(np.float32, (7,), elements=finite))
    @settings(max_examples=50, deadline=None)
    def test_sigmoid_bounded(self, a):
        s = tn.sigmoid(Tensor(a)).data
        assert np.all((s >= 0) & (s <= 1))

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_concat_slice_round_trip(self, n1, n2, rows):
        a = Tensor(np.arange(rows * n1, dtype=float).reshape(rows, n1))
        b = Tensor(-np.arange(rows * n2, dtype=float).reshape(rows, n2))
        z = tn.concat([a, b], axis=1)
        assert np.array_equal(tn.slice_axis(z, 1, 0, n1).data, a.data)
        assert np.array_equal(tn.slice_axis(z, 1, n1, n1 + n2).data, b.data)

    @given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
    @settings(max_examples=30, deadline=None)
    def test_log_softmax_normalised(self, x):
        with tn.precision(np.float64):
            out = tn.log_softmax(Tensor(x)).data
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=1e-12)
