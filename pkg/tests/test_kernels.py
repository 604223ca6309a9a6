"""Tests for the dense kernels."""

import numpy as np
import pytest

from probeforge.errors import ConfigError, NumericError, ShapeError
from probeforge.kernels import activation, as_tensor, masked_softmax_rows, matmul


class TestMatmul:
    """Test matrix products."""

    def test_small_product(self):
        """Test a hand-checked 2x2 product."""
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        b = np.array([[5, 6], [7, 8]], dtype=np.float32)
        np.testing.assert_array_equal(matmul(a, b), [[19, 22], [43, 50]])
        assert matmul(a, b).dtype == np.float32
        assert matmul(a, b, dtype=np.float64).dtype == np.float64

    def test_shape_mismatch(self):
        """Test that inner dimensions must agree."""
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))

    def test_associativity(self):
        """Test (AB)C against A(BC) on random tensors."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = (rng.standard_normal(s).astype(np.float32) for s in [(4, 5), (5, 3), (3, 6)])
            np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-4)

    def test_deterministic(self):
        """Test repeated calls give identical bits."""
        rng = np.random.default_rng(1)
        a = rng.standard_normal((16, 32)).astype(np.float32)
        b = rng.standard_normal((32, 8)).astype(np.float32)
        assert matmul(a, b).tobytes() == matmul(a, b).tobytes()

    def test_overflow_is_numeric_error(self):
        """Test that an Inf result is reported."""
        big = np.full((1, 2), 3e38, dtype=np.float32)
        with pytest.raises(NumericError):
            matmul(big, np.full((2, 1), 3e38, dtype=np.float32))


class TestSoftmax:
    """Test causal row softmax."""

    def test_rows_sum_to_one(self):
        """Test normalization and value range on random scores."""
        rng = np.random.default_rng(2)
        scores = (10 * rng.standard_normal((12, 12))).astype(np.float32)
        probs = masked_softmax_rows(scores)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-6)
        assert probs.min() >= 0.0 and probs.max() <= 1.0

    def test_causal_entries_exactly_zero(self):
        """Test that every entry above the diagonal is exactly 0."""
        rng = np.random.default_rng(3)
        probs = masked_softmax_rows(rng.standard_normal((9, 9)).astype(np.float32))
        assert np.all(probs[np.triu_indices(9, k=1)] == 0.0)
        assert probs[0, 0] == 1.0

    def test_uniform_row(self):
        """Test equal scores give a uniform row."""
        probs = masked_softmax_rows(np.zeros((4, 4), np.float32))
        np.testing.assert_allclose(probs[3], [0.25] * 4, atol=1e-7)

    def test_large_scores_are_stable(self):
        """Test max subtraction keeps huge scores finite."""
        probs = masked_softmax_rows(np.array([[1e30, 0], [1e30, 1e30]], np.float32))
        np.testing.assert_allclose(probs, [[1.0, 0.0], [0.5, 0.5]])

    def test_non_square(self):
        """Test non-square input is rejected."""
        with pytest.raises(ShapeError):
            masked_softmax_rows(np.zeros((2, 3), np.float32))


class TestActivation:
    """Test elementwise activations."""

    def test_relu(self):
        """Test relu on a sign split."""
        np.testing.assert_array_equal(activation(np.array([-1, 0, 2], np.float32), "relu"), [0, 0, 2])

    def test_silu(self):
        """Test silu fixed point and a hand value."""
        out = activation(np.array([0.0, 1.0], np.float32), "silu")
        assert out[0] == 0.0
        assert abs(out[1] - 0.7311) < 1e-4

    def test_gelu(self):
        """Test gelu at 0 and 1."""
        out = activation(np.array([0.0, 1.0], np.float32), "gelu")
        assert out[0] == 0.0
        assert abs(out[1] - 0.8413) < 1e-4

    def test_unknown_kind(self):
        """Test unknown activation names."""
        with pytest.raises(ConfigError):
            activation(np.zeros(3, np.float32), "tanh")


class TestAsTensor:
    """Test tensor conversion."""

    def test_rejects_nan(self):
        """Test NaN input is refused."""
        with pytest.raises(NumericError):
            as_tensor([1.0, float("nan")])

    def test_contiguous_float32(self):
        """Test conversion result layout."""
        tensor = as_tensor(np.arange(6, dtype=np.float64).reshape(2, 3).T)
        assert tensor.dtype == np.float32
        assert tensor.flags.c_contiguous


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
