import numpy as np
import pytest

from gnsp.linalg import (
    EigenSpectrum,
    ShapeMismatchError,
    cosine_sim_matrix,
    frobenius_norm,
    kl_rows,
    l2_normalize_rows,
    matmul,
    softmax_rows,
    sym_eig,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_orthogonal_vectors(self):
        out = matmul(np.array([[1.0, 0.0]]), np.array([[0.0], [1.0]]))
        assert np.array_equal(out, np.array([[0.0]]))

    def test_hand_product(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
        assert np.array_equal(out, np.array([[17.0], [39.0]]))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"2x3.*4x1|\(2x3\)"):
            matmul(np.zeros((2, 3)), np.zeros((4, 1)))


class TestSymEig:
    def test_diagonal(self):
        s = sym_eig(np.diag([2.0, 1.0, 0.0]))
        assert np.allclose(s.values, [2.0, 1.0, 0.0])
        # columns are signed permutations of the identity
        assert np.allclose(np.abs(s.vectors), np.eye(3))

    def test_rank_one_hand_case(self):
        s = sym_eig(np.array([[0.5, 0.5], [0.5, 0.5]]))
        assert np.allclose(s.values, [1.0, 0.0], atol=1e-12)
        v0 = s.vectors[:, 0]
        v1 = s.vectors[:, 1]
        assert np.allclose(np.abs(v0), [1 / np.sqrt(2)] * 2)
        assert np.allclose(np.abs(v1 @ np.array([1, -1]) / np.sqrt(2)), 1.0)

    def test_zero_matrix(self):
        s = sym_eig(np.zeros((3, 3)))
        assert np.array_equal(s.values, np.zeros(3))
        assert np.allclose(s.vectors.T @ s.vectors, np.eye(3))

    def test_non_square_rejected(self):
        with pytest.raises(ShapeMismatchError):
            sym_eig(np.zeros((2, 3)))

    def test_asymmetric_rejected(self):
        m = np.array([[0.0, 1.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="symmetric"):
            sym_eig(m)

    def test_random_psd_reconstruction_and_orthonormality(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            d = int(rng.integers(1, 65))
            x = rng.standard_normal((int(rng.integers(1, d + 4)), d))
            m = x.T @ x
            s = sym_eig(m)
            assert np.all(np.diff(s.values) <= 0)
            assert np.all(s.values >= 0)
            assert np.max(np.abs(s.vectors.T @ s.vectors - np.eye(d))) <= 1e-8
            recon = s.vectors @ np.diag(s.values) @ s.vectors.T
            assert frobenius_norm(recon - m) <= 1e-8 * max(1.0, frobenius_norm(m))

    def test_values_match_squared_singular_values(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            d = int(rng.integers(2, 20))
            x = rng.standard_normal((d + 3, d))
            gram = x.T @ x
            m = gram / frobenius_norm(gram)
            s = sym_eig(m)
            sv = np.linalg.svd(x, compute_uv=False)
            expected = np.sort(sv**2)[::-1] / frobenius_norm(gram)
            assert np.allclose(s.values, expected, atol=1e-10)


class TestFrobeniusNorm:
    def test_identity(self):
        assert frobenius_norm(np.eye(2)) == pytest.approx(np.sqrt(2), abs=1e-12)

    def test_all_ones(self):
        assert frobenius_norm(np.ones((2, 2))) == pytest.approx(2.0, abs=1e-12)

    def test_three_four_five(self):
        assert frobenius_norm(np.array([[3.0], [4.0]])) == pytest.approx(5.0, abs=1e-12)


class TestSoftmaxRows:
    def test_symmetric_row(self):
        assert np.allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_large_values_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 1000.0]]))
        assert np.allclose(out, [[0.5, 0.5]])
        assert np.all(np.isfinite(out))

    def test_hand_value(self):
        out = softmax_rows(np.array([[1.0, 0.0]]))
        assert np.allclose(out, [[0.73105858, 0.26894142]], atol=1e-8)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = softmax_rows(rng.standard_normal((20, 9)) * 50)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12

    def test_shift_invariance_bitwise(self):
        # dyadic inputs and shifts make every addition exact, so the
        # max-subtracted logits agree bit for bit
        rng = np.random.default_rng(4)
        rows = rng.integers(-16, 17, size=(40, 7)) / 8.0
        for shift in (1.0, 64.0, -1024.0, 0.25):
            assert np.array_equal(softmax_rows(rows), softmax_rows(rows + shift))


class TestKlRows:
    def test_identical_logits(self):
        z = np.array([[0.3, -2.0, 5.0], [1.0, 1.0, 1.0]])
        assert kl_rows(z, z) == 0.0

    def test_single_column(self):
        assert kl_rows(np.array([[3.0]]), np.array([[-7.0]])) == 0.0

    def test_swapped_two_point_rows(self):
        p = np.array([[1.0, 0.0], [0.0, 1.0]])
        q = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert kl_rows(p, q) == pytest.approx(0.92423431, abs=1e-8)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            p = rng.standard_normal((4, 6)) * 3
            q = rng.standard_normal((4, 6)) * 3
            assert kl_rows(p, q) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            kl_rows(np.zeros((2, 3)), np.zeros((3, 2)))


class TestL2NormalizeRows:
    def test_three_four(self):
        assert np.allclose(l2_normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]])

    def test_already_unit(self):
        assert np.allclose(l2_normalize_rows(np.array([[1.0, 0.0]])), [[1.0, 0.0]])

    def test_zero_row_preserved(self):
        assert np.array_equal(l2_normalize_rows(np.zeros((1, 2)), eps=1e-12), np.zeros((1, 2)))

    def test_output_norms(self):
        rng = np.random.default_rng(6)
        out = l2_normalize_rows(rng.standard_normal((30, 5)))
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) <= 1e-12


class TestCosineSimMatrix:
    def test_orthonormal_self(self):
        a = np.eye(3)
        assert np.allclose(cosine_sim_matrix(a, a), np.eye(3))

    def test_orthogonal(self):
        out = cosine_sim_matrix(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        assert np.allclose(out, [[0.0]])

    def test_cos_45(self):
        out = cosine_sim_matrix(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]]))
        assert out[0, 0] == pytest.approx(0.70710678, abs=1e-8)

    def test_entries_bounded(self):
        rng = np.random.default_rng(9)
        s = cosine_sim_matrix(rng.standard_normal((40, 8)), rng.standard_normal((30, 8)))
        assert np.all(s >= -1 - 1e-12)
        assert np.all(s <= 1 + 1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cosine_sim_matrix(np.zeros((2, 3)), np.zeros((2, 4)))
