import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from okgrad import smalllin

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_svd_reconstructs_and_is_orthogonal(c):
    res = smalllin.svd(c)
    assert np.allclose(res.reconstruct(), c, atol=1e-9 * max(1.0, np.abs(c).max()))
    assert np.allclose(res.u.T @ res.u, np.eye(c.shape[0]), atol=1e-10)
    assert np.allclose(res.v.T @ res.v, np.eye(c.shape[1]), atol=1e-10)
    assert np.all(np.diff(res.d) <= 1e-12)
    assert np.all(res.d >= 0)


def test_svd_matches_lapack_singular_values(rng):
    for _ in range(20):
        c = rng.normal(size=(rng.integers(1, 8), rng.integers(1, 8)))
        ref = np.linalg.svd(c, compute_uv=False)
        assert np.allclose(smalllin.svd(c).d, ref, rtol=1e-12, atol=1e-13)


def test_svd_of_diagonal_sorts():
    res = smalllin.svd(np.diag([1.0, 3.0, 2.0]))
    assert np.allclose(res.d, [3.0, 2.0, 1.0])


def test_svd_rank_deficient_zero_values():
    c = np.outer([1.0, 2.0, 3.0], [1.0, -1.0])
    res = smalllin.svd(c)
    assert res.d[1] == 0.0
    assert np.allclose(res.reconstruct(), c)


def test_svd_rejects_bad_input():
    with pytest.raises(ValueError):
        smalllin.svd(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        smalllin.svd(np.zeros(3))


def test_svd_raises_when_sweeps_exhausted(rng):
    with pytest.raises(smalllin.ConvergenceError):
        smalllin.svd(rng.normal(size=(6, 6)), max_sweeps=1)


def test_batched_svd_matches_scalar(rng):
    c = rng.normal(size=(5, 4, 4))
    u, d, v = smalllin.batched_svd(c)
    for b in range(5):
        assert np.allclose(u[b] * d[b] @ v[b].T, c[b], atol=1e-12)
        assert np.allclose(d[b], smalllin.svd(c[b]).d)


def test_complete_onb(rng):
    z0 = rng.normal(size=5)
    z0 /= np.linalg.norm(z0)
    basis = np.array([z0] + smalllin.complete_onb(z0))
    assert np.allclose(basis @ basis.T, np.eye(5), atol=1e-12)
    with pytest.raises(ValueError):
        smalllin.complete_onb(2 * z0)


def test_gram_schmidt_reconstructs(rng):
    x = rng.normal(size=(4, 7))
    x[2] = x[0] - 3 * x[1]
    onb, coeffs, rank = smalllin.gram_schmidt(list(x))
    onb = np.array(onb)
    assert rank == 3
    assert np.allclose(onb @ onb.T, np.eye(3), atol=1e-12)
    assert np.allclose(coeffs.T @ onb, x, atol=1e-12)


def test_gram_schmidt_padded_batched(rng):
    x = rng.normal(size=(3, 5, 6))
    x[1, 4] = 0.0
    onb, coeffs, rank = smalllin.gram_schmidt_padded(x)
    assert list(rank) == [5, 4, 5]
    assert np.allclose(np.swapaxes(coeffs, -1, -2) @ onb, x, atol=1e-12)
    assert np.all(onb[1, 4] == 0)


def test_gram_schmidt_dimension_mismatch():
    with pytest.raises(ValueError):
        smalllin.gram_schmidt([np.ones(2), np.ones(3)])


def test_rotate_pair_is_givens():
    x = np.array([[1.0, 0.0, 2.0]])
    y = smalllin.rotate_pair(x, 0, 1, np.pi / 2)
    assert np.allclose(y, [[0.0, -1.0, 2.0]])
    assert np.allclose(smalllin.givens(0.3) @ smalllin.givens(0.3).T, np.eye(2))
