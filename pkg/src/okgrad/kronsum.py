"""Kronecker-Sum containers and the unbiased mixing procedures built on them.

A Kronecker-Sum stores ``G = sum_i u_i (x) A_i`` without materialising ``G``.
Three ways of turning a longer sum into a shorter unbiased one live here:
the sign trick (one random sign, two terms into one), the optimal compression
of ``r + 1`` terms into ``r`` terms, and the three-sign mix used for sums of
triple products.
"""

from dataclasses import dataclass, field

import numpy as np

from . import lowrank, smalllin

DENSE_CAP = 10**7


@dataclass(frozen=True)
class KronFormat:
    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 1:
            raise ValueError(f"format entries must be positive: {self}")

    @property
    def shape(self):
        return (self.a * self.c, self.b * self.d)


@dataclass
class KroneckerSum:
    format: KronFormat
    terms: list = field(default_factory=list)

    def __post_init__(self):
        fmt = self.format
        clean = []
        for u, A in self.terms:
            u = np.asarray(u, dtype=float).reshape(fmt.a, fmt.b)
            A = np.asarray(A, dtype=float)
            if A.shape != (fmt.c, fmt.d):
                raise ValueError(f"factor shape {A.shape} does not match format {fmt}")
            clean.append((u, A))
        self.terms = clean

    @classmethod
    def from_terms(cls, terms):
        u0, A0 = terms[0]
        u0 = np.atleast_2d(np.asarray(u0, dtype=float))
        A0 = np.atleast_2d(np.asarray(A0, dtype=float))
        return cls(KronFormat(*u0.shape, *A0.shape), list(terms))

    def __len__(self):
        return len(self.terms)

    def dense(self, cap=DENSE_CAP):
        return dense(self, cap)


@dataclass
class TripleSum:
    """``sum_i a_i (x) b_i (x) c_i`` with row ``a``, column ``b`` and row ``c``."""

    terms: list = field(default_factory=list)

    def __post_init__(self):
        clean = []
        for a, b, c in self.terms:
            clean.append((np.asarray(a, dtype=float).reshape(1, -1),
                          np.asarray(b, dtype=float).reshape(-1, 1),
                          np.asarray(c, dtype=float).reshape(1, -1)))
        shapes = {(a.shape, b.shape, c.shape) for a, b, c in clean}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent triple shapes: {sorted(shapes)}")
        self.terms = clean

    def __len__(self):
        return len(self.terms)

    def dense(self, cap=DENSE_CAP):
        return dense(self, cap)


def dense(g, cap=DENSE_CAP, shape=None):
    """Materialise a :class:`KroneckerSum` or :class:`TripleSum` as a matrix."""
    if isinstance(g, KroneckerSum):
        shape = g.format.shape
        size = shape[0] * shape[1]
        if size > cap:
            raise MemoryError(f"dense expansion needs {size} entries, cap is {cap}")
        out = np.zeros(shape)
        for u, A in g.terms:
            out += np.kron(u, A)
        return out
    if isinstance(g, TripleSum):
        if not g.terms:
            if shape is None:
                raise ValueError("empty TripleSum needs an explicit shape")
            return np.zeros(shape)
        a, b, c = g.terms[0]
        size = b.size * a.size * c.size
        if size > cap:
            raise MemoryError(f"dense expansion needs {size} entries, cap is {cap}")
        out = np.zeros((b.size, a.size * c.size))
        for a, b, c in g.terms:
            out += np.kron(np.kron(a, b), c)
        return out
    raise TypeError(f"cannot densify {type(g).__name__}")


def _balance(*factors):
    """Rescale factors to a common norm without changing their outer product."""
    norms = [np.linalg.norm(f) for f in factors]
    if min(norms) == 0:
        return factors
    target = np.prod(norms) ** (1.0 / len(norms))
    return tuple(f * (target / nf) for f, nf in zip(factors, norms))


def _draw(rng, sign, size):
    if sign is not None:
        return np.asarray(sign, dtype=float).reshape(-1)
    if rng is None:
        raise ValueError("either rng or explicit signs must be given")
    return rng.integers(0, 2, size=size) * 2.0 - 1.0


def sign_trick_mix(t1, t2, rng=None, sign=None, rescale=True):
    """Merge ``u (x) A + h (x) D`` into one random Kronecker product.

    Each pair is first rescaled so both of its factors share one norm, then
    ``(u + c h) (x) (A + c D)`` is returned for a uniform sign ``c``.
    """
    (u, A), (h, D) = t1, t2
    u, A, h, D = (np.asarray(x, dtype=float) for x in (u, A, h, D))
    if u.shape != h.shape or A.shape != D.shape:
        raise ValueError("sign trick needs matching factor shapes")
    if rescale:
        u, A = _balance(u, A)
        h, D = _balance(h, D)
    c = _draw(rng, sign, 1)[0]
    return u + c * h, A + c * D


def pairwise_sign_mix(g, rng=None, signs=None, rescale=True):
    """Averaged-copies strategy: split the last term evenly over the others and sign-mix each pair.

    This is how ``r`` independent single-product approximators absorb a fresh
    term, written as one ``r``-term sum.
    """
    terms = g.terms
    r = len(terms) - 1
    if r < 1:
        return KroneckerSum(g.format, list(terms))
    h, D = terms[-1]
    s = _draw(rng, signs, r)
    out = [sign_trick_mix(terms[i], (h, D / r), sign=s[i:i + 1], rescale=rescale) for i in range(r)]
    return KroneckerSum(g.format, out)


def ok_coefficients(g):
    """Orthonormal bases of both factor spans and the coefficient matrix ``C``.

    Returns ``(v, L, B, R, C)`` with ``u_j = sum_i L[i, j] v_i``,
    ``A_j = sum_i R[i, j] B_i`` and ``G = sum_ij C[i, j] v_i (x) B_j``.
    """
    us = [u.ravel() for u, _ in g.terms]
    As = [A.ravel() for _, A in g.terms]
    v, L, _ = smalllin.gram_schmidt(us)
    B, R, _ = smalllin.gram_schmidt(As)
    C = L @ R.T if len(v) and len(B) else np.zeros((max(len(v), 1), max(len(B), 1)))
    return v, L, B, R, C


def ok_sign_count(g, r):
    """How many signs :func:`ok_compress` draws for ``g`` at target size ``r``."""
    if len(g) <= r:
        return 0
    v, _, B, _, C = ok_coefficients(g)
    if not v or not B:
        return 0
    return lowrank.tail_signs_needed(C, r)


def ok_compress(g, r, rng=None, signs=None, biased=False):
    """Compress an ``(r + 1)``-term Kronecker-Sum to ``r`` terms.

    Unbiased and of minimum variance unless ``biased`` is set, in which case
    the closest deterministic ``r``-term sum is returned instead.
    """
    if len(g) <= r:
        return KroneckerSum(g.format, list(g.terms))
    fmt = g.format
    v, _, B, _, C = ok_coefficients(g)
    if not v or not B:
        zero = (np.zeros((fmt.a, fmt.b)), np.zeros((fmt.c, fmt.d)))
        return KroneckerSum(fmt, [zero] * r)
    if biased:
        l, rm = lowrank.opt_bias(C, r)
        pad = r - l.shape[1]
        l = np.hstack([l, np.zeros((l.shape[0], pad))])
        rm = np.hstack([rm, np.zeros((rm.shape[0], pad))])
    else:
        sample = lowrank.opt(C, r, rng=rng, signs=signs)
        l, rm = sample.l, sample.r_mat
    v = np.array(v)
    B = np.array(B)
    terms = []
    for j in range(r):
        terms.append(((l[:, j] @ v).reshape(fmt.a, fmt.b), (rm[:, j] @ B).reshape(fmt.c, fmt.d)))
    return KroneckerSum(fmt, terms)


def ok_compress_batched(us, As, r, signs=None, biased=False):
    """Vectorised :func:`ok_compress` over a leading batch axis.

    ``us[b, r+1, p]`` and ``As[b, r+1, N]`` hold flattened factors, ``signs[b, r+1]``
    the random signs. Rank-deficient spans appear as zero basis rows, which
    makes ``C`` square with zero rows/columns instead of rectangular.
    """
    v, L, _ = smalllin.gram_schmidt_padded(us)
    B, R, _ = smalllin.gram_schmidt_padded(As)
    C = L @ np.swapaxes(R, -1, -2)
    if biased:
        lp, rp = lowrank.opt_bias_batched(C, r)
    else:
        lp, rp = lowrank.opt_batched(C, r, signs)
    return np.swapaxes(lp, -1, -2) @ v, np.swapaxes(rp, -1, -2) @ B


def ktp_mix(t1, t2, rng=None, signs=None, rescale=True):
    """Merge two triple products ``a(x)b(x)c + h(x)d(x)e`` into one.

    Returns ``(a + s1 h, b + s2 d, c + s1 s2 e)`` for independent uniform
    signs ``s1, s2``; the cross terms vanish in expectation.
    """
    (a, b, c), (h, d, e) = t1, t2
    a, b, c, h, d, e = (np.asarray(x, dtype=float) for x in (a, b, c, h, d, e))
    if a.shape != h.shape or b.shape != d.shape or c.shape != e.shape:
        raise ValueError("ktp_mix needs matching factor shapes")
    if rescale:
        a, b, c = _balance(a, b, c)
        h, d, e = _balance(h, d, e)
    s1, s2 = _draw(rng, signs, 2)
    return a + s1 * h, b + s2 * d, c + s1 * s2 * e
