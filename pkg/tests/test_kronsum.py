import numpy as np
import pytest

from conftest import enumerate_moments
from okgrad import kronsum
from okgrad.kronsum import KronFormat, KroneckerSum, TripleSum


def random_sum(rng, terms, fmt=KronFormat(1, 3, 2, 2)):
    return KroneckerSum(fmt, [(rng.normal(size=(fmt.a, fmt.b)), rng.normal(size=(fmt.c, fmt.d)))
                              for _ in range(terms)])


def case_one():
    u = np.array([[1.0, 0.0, 0.0]])
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    d = np.array([[0.0, 0.0], [0.0, 1.0]])
    return KroneckerSum(KronFormat(1, 3, 2, 2), [(u, a), (u, d)])


def sign_trick_moments(g):
    target = g.dense()
    r = len(g) - 1
    return enumerate_moments(target, lambda s: kronsum.pairwise_sign_mix(g, signs=s).dense(), r)


def ok_moments(g, r):
    target = g.dense()
    k = kronsum.ok_sign_count(g, r)
    return enumerate_moments(target, lambda s: kronsum.ok_compress(g, r, signs=s if k else None).dense(), k)


def test_dense_is_sum_of_kron(rng):
    g = random_sum(rng, 2)
    want = sum(np.kron(u, a) for u, a in g.terms)
    assert np.allclose(g.dense(), want)
    assert g.format.shape == (2, 6)


def test_format_mismatch_rejected():
    with pytest.raises(ValueError):
        KroneckerSum(KronFormat(1, 2, 2, 2), [(np.ones((1, 3)), np.ones((2, 2)))])


def test_dense_cap():
    g = KroneckerSum(KronFormat(1, 2000, 100, 100), [(np.ones((1, 2000)), np.ones((100, 100)))])
    with pytest.raises(MemoryError):
        g.dense()


def test_case_one_exact_values():
    g = case_one()
    _, var_ok = ok_moments(g, 1)
    _, var_st = sign_trick_moments(g)
    a_plus_d = np.eye(2)
    assert var_ok == pytest.approx(0.0, abs=1e-24)
    assert var_st == pytest.approx(np.sum(a_plus_d**2), rel=1e-12)
    out = kronsum.ok_compress(g, 1, rng=np.random.default_rng(0))
    assert len(out) == 1
    assert np.allclose(out.dense(), g.dense())


def test_ok_coefficient_orientation(rng):
    g = random_sum(rng, 3)
    v, _, b, _, c = kronsum.ok_coefficients(g)
    rebuilt = sum(c[i, j] * np.kron(v[i][None, :], b[j].reshape(2, 2))
                  for i in range(len(v)) for j in range(len(b)))
    assert np.allclose(rebuilt, g.dense(), atol=1e-12)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_ok_unbiased_and_dominates_sign_trick(rng, r):
    for _ in range(10):
        g = random_sum(rng, r + 1)
        mean, var_ok = ok_moments(g, r)
        assert np.max(np.abs(mean - g.dense())) <= 1e-10 * max(1.0, np.abs(g.dense()).max())
        mean_st, var_st = sign_trick_moments(g)
        assert np.allclose(mean_st, g.dense(), atol=1e-10)
        assert var_ok <= var_st * (1 + 1e-9)


def test_ok_biased_is_deterministic(rng):
    g = random_sum(rng, 3)
    a = kronsum.ok_compress(g, 2, biased=True).dense()
    b = kronsum.ok_compress(g, 2, biased=True).dense()
    assert np.array_equal(a, b)
    assert np.linalg.norm(a - g.dense()) < np.linalg.norm(g.dense())


def test_ok_batched_matches_scalar_variance(rng):
    r = 2
    g = random_sum(rng, r + 1)
    us = np.stack([u.ravel() for u, _ in g.terms])[None]
    As = np.stack([a.ravel() for _, a in g.terms])[None]
    target = g.dense()

    def sampler(s):
        lu, la = kronsum.ok_compress_batched(us, As, r, signs=s[None, :])
        return sum(np.kron(lu[0, j][None, :], la[0, j].reshape(2, 2)) for j in range(r))

    mean, var = enumerate_moments(target, sampler, r + 1)
    _, var_scalar = ok_moments(g, r)
    assert np.allclose(mean, target, atol=1e-12)
    assert var == pytest.approx(var_scalar, rel=1e-9)


def test_ok_variance_monotone_in_rank(rng):
    g = random_sum(rng, 5, KronFormat(1, 4, 3, 3))
    vars_ = [ok_moments(g, r)[1] for r in (1, 2, 3, 4)]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(vars_, vars_[1:]))


def test_sign_trick_balancing_preserves_mean(rng):
    u, a = rng.normal(size=(1, 3)), 5 * rng.normal(size=(2, 2))
    h, d = 0.01 * rng.normal(size=(1, 3)), rng.normal(size=(2, 2))
    target = np.kron(u, a) + np.kron(h, d)
    mean, _ = enumerate_moments(target, lambda s: np.kron(*kronsum.sign_trick_mix((u, a), (h, d), sign=s)), 1)
    assert np.allclose(mean, target, atol=1e-12)


def test_ktp_mix_unbiased(rng):
    t1 = (rng.normal(size=3), rng.normal(size=2), rng.normal(size=4))
    t2 = (rng.normal(size=3), rng.normal(size=2), rng.normal(size=4))
    target = TripleSum([t1, t2]).dense()
    mean, var = enumerate_moments(target, lambda s: TripleSum([kronsum.ktp_mix(t1, t2, signs=s)]).dense(), 2)
    assert np.allclose(mean, target, atol=1e-12)
    assert var > 0


def test_triple_sum_dense_layout():
    t = TripleSum([(np.array([1.0, 2.0]), np.array([1.0, 0.0]), np.array([3.0]))])
    assert np.allclose(t.dense(), [[3.0, 6.0], [0.0, 0.0]])
