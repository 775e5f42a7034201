"""Tensor helpers and reproducible random streams."""

import numpy as np
import pytest

from dropaug import DomainError, NumericError, RngStream, ShapeError
from dropaug.linalg import as_tensor, check_finite, elementwise, matmul, reduce


class TestAsTensor:
    def test_row_vector_promotion(self):
        a = as_tensor([1.0, 2.0, 3.0])
        assert a.shape == (1, 3)
        assert a.dtype == np.float64
        assert a.flags["C_CONTIGUOUS"]

    def test_rejects_3d(self):
        with pytest.raises(ShapeError):
            as_tensor(np.zeros((2, 2, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            as_tensor([[1.0, np.nan]])
        with pytest.raises(NumericError):
            check_finite(np.array([[np.inf]]))


class TestMatmul:
    def test_manual_product(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0, 6.0], [7.0, 8.0]]
        expected = np.array([[19.0, 22.0], [43.0, 50.0]])
        assert np.array_equal(matmul(a, b), expected)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_overflow_is_numeric_error(self):
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            matmul(np.full((1, 1), 1e308), np.full((1, 1), 10.0))


class TestElementwise:
    def test_ops(self):
        a = np.array([[1.0, 2.0]])
        b = np.array([[3.0, 5.0]])
        assert np.array_equal(elementwise(a, b, "add"), [[4.0, 7.0]])
        assert np.array_equal(elementwise(a, b, "sub"), [[-2.0, -3.0]])
        assert np.array_equal(elementwise(a, b, "mul"), [[3.0, 10.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise(np.zeros((1, 2)), np.zeros((2, 1)), "add")

    def test_unknown_op(self):
        with pytest.raises(DomainError):
            elementwise(np.zeros((1, 1)), np.zeros((1, 1)), "div")


class TestReduce:
    def test_scalar_kinds(self):
        a = np.array([[1.0, -2.0], [3.0, 4.0]])
        assert reduce(a, "sum") == 6.0
        assert reduce(a, "mean") == 1.5
        assert reduce(a, "max") == 4.0
        assert reduce(a, "sq_norm") == 30.0

    def test_argmax_breaks_ties_low(self):
        a = np.array([[2.0, 2.0, 1.0], [0.0, 5.0, 5.0]])
        out = reduce(a, "argmax_per_row")
        assert out.dtype == np.int64
        assert np.array_equal(out, [0, 1])

    def test_empty_and_unknown(self):
        with pytest.raises(DomainError):
            reduce(np.zeros((0, 3)), "sum")
        with pytest.raises(DomainError):
            reduce(np.ones((1, 1)), "median")


class TestRngStream:
    def test_same_key_replays(self):
        a = RngStream(123, 4).uniform(10)
        b = RngStream(123, 4).uniform(10)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(123, 0).uniform(10)
        b = RngStream(123, 1).uniform(10)
        c = RngStream(124, 0).uniform(10)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_substream_is_stateless_derivation(self):
        # deriving after consuming draws must not shift the child stream
        s = RngStream(9)
        before = s.substream(4).uniform(5)
        s.uniform(7)
        after = s.substream(4).uniform(5)
        assert np.array_equal(before, after)
        assert np.array_equal(before, RngStream(9).substream(4).uniform(5))

    def test_substream_coordinates_are_order_sensitive(self):
        s = RngStream(9)
        assert not np.array_equal(s.substream(1, 2).uniform(8),
                                  s.substream(2, 1).uniform(8))
        assert not np.array_equal(s.substream(0).uniform(8), s.uniform(8))

    def test_bernoulli_degenerate_and_domain(self):
        s = RngStream(1)
        assert np.array_equal(s.bernoulli(50, 0.0), np.zeros(50))
        assert np.array_equal(s.bernoulli(50, 1.0), np.ones(50))
        with pytest.raises(DomainError):
            s.bernoulli(5, 1.5)

    def test_bernoulli_rate(self):
        draws = RngStream(2).bernoulli(20000, 0.3)
        assert set(np.unique(draws)) <= {0.0, 1.0}
        # 4 sigma band around 0.3 at n = 20000
        assert abs(draws.mean() - 0.3) < 4 * np.sqrt(0.3 * 0.7 / 20000)

    def test_uniform_bounds(self):
        draws = RngStream(3).uniform(1000, 2.0, 5.0)
        assert draws.min() >= 2.0 and draws.max() < 5.0
        with pytest.raises(DomainError):
            RngStream(3).uniform(5, 1.0, 0.0)

    def test_gaussian_degenerate_and_domain(self):
        assert np.array_equal(RngStream(4).gaussian(7, 3.5, 0.0), np.full(7, 3.5))
        with pytest.raises(DomainError):
            RngStream(4).gaussian(5, 0.0, -1.0)

    def test_permutation(self):
        perm = RngStream(5).permutation(100)
        assert np.array_equal(np.sort(perm), np.arange(100))

    def test_integers(self):
        draws = RngStream(6).integers(500, 3, 7)
        assert draws.min() >= 3 and draws.max() < 7
        with pytest.raises(DomainError):
            RngStream(6).integers(5, 4, 4)

    def test_negative_key_rejected(self):
        with pytest.raises(DomainError):
            RngStream(-1)
        with pytest.raises(DomainError):
            RngStream(0, -2)
