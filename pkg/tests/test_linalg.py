import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deeponet_capacity.linalg import ConvergenceError, as_matrix, frobenius_norm, row_norms, spectral_norm, spectral_norms

finite = st.floats(-1e3, 1e3, allow_nan=False)
matrices = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_row_norms_examples():
    assert row_norms([[3, 4], [0, 0]]).tolist() == [5.0, 0.0]
    assert row_norms(np.eye(3)).tolist() == [1.0, 1.0, 1.0]
    assert row_norms([[1, 1, 1, 1]]).tolist() == [2.0]
    assert row_norms(np.zeros((0, 3))).size == 0


def test_spectral_norm_examples():
    assert spectral_norm(np.diag([2.0, 1.0])) == pytest.approx(2.0, rel=1e-10)
    assert spectral_norm(np.zeros((3, 2))) == 0.0
    assert spectral_norm(np.outer([1.0, 0.0], [0.0, 1.0])) == pytest.approx(1.0, rel=1e-10)


def test_spectral_norm_matches_svd_oracle():
    # frozen largest singular value from an SVD of this seeded matrix
    A = np.random.default_rng(3).standard_normal((5, 4))
    assert spectral_norm(A) == pytest.approx(4.688031376321627, rel=1e-9)


def test_spectral_norm_escapes_orthogonal_start():
    # all-ones start is an eigenvector of the small eigenvalue here
    A = np.array([[1.0, -1.0], [-1.0, 1.0]]) * 3 + np.eye(2)
    assert spectral_norm(A) == pytest.approx(7.0, rel=1e-10)


def test_frobenius_examples():
    assert frobenius_norm(np.eye(4)) == 2.0
    assert frobenius_norm([[1, 1], [1, 1]]) == 2.0
    assert frobenius_norm(np.zeros((2, 5))) == 0.0


def test_input_validation():
    with pytest.raises(ValueError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ValueError):
        frobenius_norm([[np.nan]])
    with pytest.raises(ValueError):
        spectral_norm(np.eye(2), rel_tol=0)


def test_non_convergence_reports_estimate():
    A = np.diag([1.0, 0.999999])
    with pytest.raises(ConvergenceError) as exc:
        spectral_norm(A + 0.3 * np.ones((2, 2)), rel_tol=1e-300, max_iters=3)
    assert exc.value.estimate > 0
    assert exc.value.iterations == 3


def test_spectral_below_frobenius_500_matrices():
    rng = np.random.default_rng(0)
    for _ in range(500):
        A = rng.standard_normal(tuple(rng.integers(1, 8, size=2)))
        assert spectral_norm(A) <= frobenius_norm(A) * (1 + 1e-12)


@given(matrices)
def test_frobenius_squares_sum_of_row_norms(A):
    f = frobenius_norm(A)
    assert f**2 == pytest.approx(float(np.sum(row_norms(A) ** 2)), rel=1e-12, abs=1e-300)


@given(arrays(np.float64, st.integers(1, 6), elements=finite), arrays(np.float64, st.integers(1, 6), elements=finite))
def test_rank_one_spectral_norm(u, v):
    expected = np.linalg.norm(u) * np.linalg.norm(v)
    assert spectral_norm(np.outer(u, v)) == pytest.approx(expected, rel=1e-9, abs=1e-300)


def test_batched_matches_scalar():
    rng = np.random.default_rng(1)
    stack = rng.standard_normal((3, 4, 5, 2))
    stack[0, 0] = 0.0
    got = spectral_norms(stack)
    assert got.shape == (3, 4)
    for idx in np.ndindex(3, 4):
        assert got[idx] == pytest.approx(spectral_norm(stack[idx]), rel=1e-9, abs=0)
