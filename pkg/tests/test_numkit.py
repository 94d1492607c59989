"""
Tests for the linear algebra and random-number primitives
"""

import numpy as np
import pytest

from continual_lora.core.exceptions import ShapeError
from continual_lora.services.numkit import (
    cosine_similarity,
    cosine_with_flag,
    derive_rng,
    derive_seed_sequence,
    frobenius_norm,
    make_rng,
    matmul,
    numerical_rank,
    orthonormal_rowspace_basis,
    randn_matrix,
    svd,
)


def _reconstruct(result):
    k = result.sigma.size
    return result.u[:, :k] @ np.diag(result.sigma) @ result.v[:, :k].T


@pytest.mark.unit
class TestMatmul:
    """Test the checked matrix product"""

    def test_matches_numpy(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        assert np.allclose(matmul(a, b), a @ b, atol=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            matmul(rng.standard_normal((3, 4)), rng.standard_normal((3, 2)))

    def test_rejects_vectors(self):
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 1)))

    def test_associative_on_random_triples(self, rng):
        for _ in range(50):
            m, k, p, q = rng.integers(1, 24, size=4)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, p))
            c = rng.standard_normal((p, q))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.max(np.abs(left - right)) <= 1e-10 * max(1.0, np.max(np.abs(left)))


@pytest.mark.unit
class TestSVD:
    """Test the one-sided Jacobi SVD"""

    @pytest.mark.parametrize("shape", [(6, 4), (4, 6), (5, 5), (1, 7), (7, 1), (16, 16)])
    def test_reconstruction(self, rng, shape):
        m = rng.standard_normal(shape)
        result = svd(m)
        assert np.max(np.abs(_reconstruct(result) - m)) <= 1e-10 * max(1.0, np.linalg.norm(m))

    def test_singular_values_match_lapack(self, rng):
        m = rng.standard_normal((9, 5))
        result = svd(m)
        assert np.allclose(result.sigma, np.linalg.svd(m, compute_uv=False), atol=1e-12)

    def test_sorted_descending_and_non_negative(self, rng):
        result = svd(rng.standard_normal((8, 6)))
        assert np.all(result.sigma >= 0)
        assert np.all(np.diff(result.sigma) <= 0)

    def test_factors_orthonormal(self, rng):
        result = svd(rng.standard_normal((7, 4)))
        assert np.allclose(result.u.T @ result.u, np.eye(4), atol=1e-12)
        assert np.allclose(result.v.T @ result.v, np.eye(4), atol=1e-12)

    @pytest.mark.slow
    def test_random_shapes_up_to_64_by_256(self):
        rng = make_rng(2024)
        for _ in range(200):
            rows, cols = int(rng.integers(1, 65)), int(rng.integers(1, 257))
            if rng.random() < 0.5:
                rows, cols = cols, rows
            m = rng.standard_normal((rows, cols))
            result = svd(m)
            k = min(rows, cols)
            assert np.max(np.abs(result.u.T @ result.u - np.eye(k))) <= 1e-10
            assert np.max(np.abs(result.v.T @ result.v - np.eye(k))) <= 1e-10
            assert np.max(np.abs(_reconstruct(result) - m)) <= 1e-10 * np.linalg.norm(m)

    def test_full_matrices_are_square_orthogonal(self, rng):
        m = rng.standard_normal((3, 7))
        result = svd(m, full_matrices=True)
        assert result.u.shape == (3, 3)
        assert result.v.shape == (7, 7)
        assert np.allclose(result.v.T @ result.v, np.eye(7), atol=1e-12)
        assert np.allclose(_reconstruct(result), m, atol=1e-10)

    def test_full_matrices_rank_deficient(self, rng):
        m = rng.standard_normal((5, 1)) @ rng.standard_normal((1, 4))
        result = svd(m, full_matrices=True)
        assert result.u.shape == (5, 5)
        assert np.allclose(result.u.T @ result.u, np.eye(5), atol=1e-12)
        assert np.allclose(_reconstruct(result), m, atol=1e-10)

    def test_zero_matrix(self):
        result = svd(np.zeros((4, 3)))
        assert np.all(result.sigma == 0.0)
        assert np.allclose(_reconstruct(result), 0.0)

    def test_diagonal_matrix(self):
        result = svd(np.diag([3.0, 1.0, 2.0]))
        assert np.allclose(result.sigma, [3.0, 2.0, 1.0], atol=1e-14)

    def test_non_finite_input_rejected(self):
        m = np.ones((3, 3))
        m[1, 1] = np.nan
        with pytest.raises(ArithmeticError):
            svd(m)


@pytest.mark.unit
class TestRank:
    """Test numerical rank and row-space bases"""

    def test_rank_of_product(self, rng):
        m = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 8))
        assert numerical_rank(m) == 3

    def test_full_rank(self, rng):
        assert numerical_rank(rng.standard_normal((4, 9))) == 4

    def test_zero_rank(self):
        assert numerical_rank(np.zeros((3, 3))) == 0

    def test_rowspace_basis_orthonormal_and_spanning(self, rng):
        row = rng.standard_normal(6)
        m = np.vstack([row, 2.0 * row])
        q = orthonormal_rowspace_basis(m)
        assert q.shape == (1, 6)
        assert np.allclose(q @ q.T, np.eye(1), atol=1e-12)
        # projecting the rows onto the basis leaves nothing behind
        assert np.allclose(m - (m @ q.T) @ q, 0.0, atol=1e-12)

    def test_rowspace_of_zero_is_empty(self):
        assert orthonormal_rowspace_basis(np.zeros((3, 5))).shape == (0, 5)


@pytest.mark.unit
class TestRandomStreams:
    """Test seeding and normal draws"""

    def test_same_seed_same_stream(self):
        assert np.array_equal(randn_matrix(make_rng(7), 3, 4), randn_matrix(make_rng(7), 3, 4))

    def test_derived_streams_differ(self):
        a = randn_matrix(derive_rng(0, 2, 0, 0, 1), 2, 2)
        b = randn_matrix(derive_rng(0, 2, 0, 0, 2), 2, 2)
        assert not np.array_equal(a, b)

    def test_derived_stream_reproducible(self):
        assert np.array_equal(randn_matrix(derive_rng(3, 1, 5), 2, 3), randn_matrix(derive_rng(3, 1, 5), 2, 3))

    def test_seed_sequence_depends_on_every_key_part(self):
        state = derive_seed_sequence(0, 1, 2).generate_state(4)
        assert np.array_equal(state, derive_seed_sequence(0, 1, 2).generate_state(4))
        assert not np.array_equal(state, derive_seed_sequence(0, 2, 1).generate_state(4))

    def test_zero_std_gives_zeros_but_advances(self):
        rng_a = make_rng(11)
        rng_b = make_rng(11)
        assert np.all(randn_matrix(rng_a, 2, 2, std=0.0) == 0.0)
        randn_matrix(rng_b, 2, 2)
        assert np.array_equal(randn_matrix(rng_a, 1, 3), randn_matrix(rng_b, 1, 3))

    def test_negative_std_rejected(self, rng):
        with pytest.raises(ValueError):
            randn_matrix(rng, 2, 2, std=-1.0)

    def test_std_scales_draws(self):
        base = randn_matrix(make_rng(5), 3, 3, std=1.0)
        assert np.allclose(randn_matrix(make_rng(5), 3, 3, std=0.5), 0.5 * base)

    def test_large_sample_moments(self):
        draws = randn_matrix(make_rng(42), 1000, 1000, std=1.0)
        assert abs(draws.mean()) <= 0.01
        assert abs(draws.std() - 1.0) <= 0.01


@pytest.mark.unit
class TestNormsAndCosine:
    """Test Frobenius norm and cosine similarity"""

    def test_frobenius(self):
        assert frobenius_norm(np.array([[3.0, 0.0], [0.0, 4.0]])) == pytest.approx(5.0)

    def test_cosine_parallel_and_opposite(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(v, 2.5 * v) == pytest.approx(1.0, abs=1e-15)
        assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-15)

    def test_cosine_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0

    def test_zero_vector_flagged(self):
        value, flagged = cosine_with_flag(np.zeros(3), np.ones(3))
        assert value == 0.0
        assert flagged

    def test_cosine_length_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_similarity(np.ones(3), np.ones(4))
