"""Unbiased low-rank approximation of matrices with minimum variance.

Given ``C`` and a rank ``r``, :func:`opt` returns random factors ``L, R`` with
``E[L @ R.T] = C`` and ``rank(L @ R.T) <= r`` whose variance
``E||L R^T - C||^2`` is the smallest achievable. The construction reduces to a
diagonal matrix by SVD, keeps the large singular values deterministically and
mixes the small tail with a sign-randomised orthonormal frame.
"""

from dataclasses import dataclass, field

import numpy as np

from . import smalllin

SPLIT_SLACK = 1e-12


@dataclass(frozen=True)
class DiagSplit:
    """Where the deterministic head of a diagonal ends.

    ``m`` is 1-based: entries ``d[:m-1]`` are kept exactly, the tail
    ``d[m-1:]`` is mixed into ``k = r - m + 1`` random directions.
    """

    m: int
    k: int
    s1: float
    s2: float
    variance_bound: float


@dataclass(frozen=True)
class LowRankSample:
    l: np.ndarray
    r_mat: np.ndarray
    sign_draw: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def product(self):
        return self.l @ self.r_mat.T


def _check_diag(d):
    d = np.asarray(d, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("diagonal must be non-empty")
    if not np.all(np.isfinite(d)):
        raise ValueError("diagonal contains NaN or Inf")
    if np.any(d < 0):
        raise ValueError("diagonal entries must be non-negative")
    if np.any(np.diff(d) > SPLIT_SLACK * max(d[0], 1.0)):
        raise ValueError("diagonal must be sorted non-increasing")
    return d


def _check_rank(r):
    if int(r) != r or r < 1:
        raise ValueError(f"rank must be a positive integer, got {r}")
    return int(r)


def split_index(d, r):
    """Smallest 1-based ``m`` with ``(r - m + 1) d_m <= sum_{j>=m} d_j``, plus the tail statistics."""
    d = _check_diag(d)
    r = _check_rank(r)
    suffix = np.cumsum(d[::-1])[::-1]
    m = None
    for i in range(1, min(r, d.size) + 1):
        lhs = (r - i + 1) * d[i - 1]
        if lhs <= suffix[i - 1] * (1.0 + SPLIT_SLACK):
            m = i
            break
    if m is None:
        # fewer entries than r: nothing needs mixing
        m = d.size + 1
    k = r - m + 1
    tail = d[m - 1:]
    s1 = float(np.sum(tail))
    s2 = float(np.sum(tail * tail))
    bound = s1 * s1 / k - s2 if s1 > 0 else 0.0
    return DiagSplit(m=m, k=k, s1=s1, s2=s2, variance_bound=max(bound, 0.0))


def _draw_signs(rng, size):
    if rng is None:
        raise ValueError("either rng or signs must be given")
    return rng.integers(0, 2, size=size) * 2.0 - 1.0


def _n_nonzero(d):
    if d.size == 0 or d[0] == 0:
        return 0
    return int(np.sum(d > d[0] * d.size * np.finfo(float).eps))


def sample_opt_diag(d, r, rng=None, signs=None):
    """Minimum-variance unbiased rank-``r`` factorisation of ``diag(d)``.

    Returns ``LowRankSample`` with ``l == r_mat`` of shape ``(len(d), r)``.
    ``signs`` (length of the mixed tail) overrides the random draw, which is
    how the exhaustive enumeration oracles drive this function.
    """
    d = _check_diag(d)
    r = _check_rank(r)
    n = d.size
    l = np.zeros((n, r))
    nz = _n_nonzero(d)
    if nz <= r:
        idx = np.arange(min(nz, r))
        l[idx, idx] = np.sqrt(d[idx])
        return LowRankSample(l=l, r_mat=l, sign_draw=np.zeros(0))

    split = split_index(d, r)
    m, k, s1 = split.m, split.k, split.s1
    head = np.arange(m - 1)
    l[head, head] = np.sqrt(d[head])
    tail = d[m - 1:]
    w = np.clip(tail * k / s1, 0.0, 1.0)
    if tail.size == k + 1:
        z0 = np.sqrt(np.clip(1.0 - w, 0.0, None))
        z0 /= np.linalg.norm(z0)
        frame = np.array(smalllin.complete_onb(z0))
    else:
        frame = idempotent_with_diagonal(w)
    if signs is None:
        signs = _draw_signs(rng, tail.size)
    signs = np.asarray(signs, dtype=float).ravel()
    if signs.size != tail.size:
        raise ValueError(f"expected {tail.size} signs, got {signs.size}")
    z = np.sqrt(s1 / k) * (signs[None, :] * frame)
    l[m - 1:, m - 1:] = z.T
    return LowRankSample(l=l, r_mat=l, sign_draw=signs)


def opt(c, r, rng=None, signs=None):
    """Unbiased minimum-variance approximation of ``c`` by a matrix of rank at most ``r``.

    Rectangular ``c`` is supported. When ``c`` already has rank ``<= r`` the
    result is deterministic and exact.
    """
    c = smalllin.as_mat(c)
    r = _check_rank(r)
    res = smalllin.svd(c)
    kk = res.d.size
    if r >= kk or _n_nonzero(res.d) <= r:
        l, rm = opt_bias(c, min(r, kk), res)
        pad = r - l.shape[1]
        if pad:
            l = np.hstack([l, np.zeros((l.shape[0], pad))])
            rm = np.hstack([rm, np.zeros((rm.shape[0], pad))])
        return LowRankSample(l=l, r_mat=rm, sign_draw=np.zeros(0))
    sample = sample_opt_diag(res.d, r, rng=rng, signs=signs)
    l = res.u[:, :kk] @ sample.l
    rm = res.v[:, :kk] @ sample.r_mat
    return LowRankSample(l=l, r_mat=rm, sign_draw=sample.sign_draw)


def opt_bias(c, r, svd_result=None):
    """Eckart-Young truncation: deterministic ``(l, r_mat)`` minimising ``||c - l r_mat^T||``."""
    c = smalllin.as_mat(c)
    r = _check_rank(r)
    res = svd_result if svd_result is not None else smalllin.svd(c)
    r = min(r, res.d.size)
    root = np.sqrt(res.d[:r])
    return res.u[:, :r] * root, res.v[:, :r] * root


def tail_signs_needed(c, r):
    """Number of random signs :func:`opt` consumes for ``c`` (0 when deterministic)."""
    c = smalllin.as_mat(c)
    d = smalllin.svd(c).d
    if r >= d.size or _n_nonzero(d) <= r:
        return 0
    return d.size - split_index(d, r).m + 1


def idempotent_with_diagonal(d):
    """Orthonormal ``z_1..z_r`` (rows of the result) with ``diag(sum z_i z_i^T) = d``.

    Entries of ``d`` must lie in ``[0, 1]`` and sum to a positive integer
    ``r``. Built recursively: sort, close the first block whose sum reaches one,
    recurse on the rest and restore the two edited entries with a rotation.
    """
    d = np.asarray(d, dtype=float).ravel()
    if d.size == 0 or not np.all(np.isfinite(d)):
        raise ValueError("diagonal must be a finite non-empty vector")
    if np.any(d < -1e-9) or np.any(d > 1 + 1e-9):
        raise ValueError("diagonal entries must lie in [0, 1]")
    total = float(np.sum(d))
    r = int(round(total))
    if r < 1 or abs(total - r) > 1e-6 or r > d.size:
        raise ValueError(f"diagonal must sum to a positive integer <= {d.size}, sums to {total}")
    d = np.clip(d, 0.0, 1.0)
    return _idempotent_sorted_rec(d, r)


def _idempotent_sorted_rec(d, r):
    n = d.size
    order = np.argsort(-d, kind="stable")
    ds = d[order]
    z = np.zeros((r, n))
    if r == 1:
        z[0] = np.sqrt(ds) / max(np.sqrt(np.sum(ds)), np.finfo(float).tiny)
    elif r == n:
        z = np.eye(n)
    else:
        csum = np.cumsum(ds)
        # last index whose prefix sum stays <= 1; 0-based
        m = int(np.searchsorted(csum, 1.0 + 1e-12, side="right")) - 1
        m = min(max(m, 0), n - 2)
        alpha = max(1.0 - csum[m], 0.0)
        head = ds[:m + 1].copy()
        head[m] += alpha
        rest = ds[m + 1:].copy()
        rest[0] = max(rest[0] - alpha, 0.0)
        y = _idempotent_sorted_rec(rest, r - 1)
        z[:r - 1, m + 1:] = y
        z[r - 1, :m + 1] = np.sqrt(head) / np.sqrt(np.sum(head))
        denom = 2.0 * alpha + ds[m] - ds[m + 1]
        phi = np.arcsin(np.sqrt(alpha / denom)) if denom > 0 and alpha > 0 else 0.0
        z = smalllin.rotate_pair(z, m, m + 1, phi)
    out = np.zeros_like(z)
    out[:, order] = z
    return out


def opt_batched(c, r, signs):
    """Vectorised :func:`opt` for square ``c[b, q, q]`` with ``q = r + 1``.

    ``signs[b, q]`` supplies one sign per coordinate; only the mixed tail uses
    them. Returns ``(l, r_mat)`` of shape ``(b, q, r)``. Null-space singular
    directions are never mixed here, so the thin SVD is sufficient.
    """
    c = np.asarray(c, dtype=float)
    nb, q, _ = c.shape
    u, d, v = smalllin.batched_svd(c)
    live = d > d[:, :1] * q * np.finfo(float).eps
    nz = np.sum(live, axis=1)
    mixed = nz > r

    l0 = np.zeros((nb, q, r))
    idx = np.arange(r)
    l0[:, idx, idx] = np.sqrt(d[:, :r])

    if np.any(mixed):
        dm = d[mixed]
        suffix = np.cumsum(dm[:, ::-1], axis=1)[:, ::-1]
        i = np.arange(1, r + 1)
        cond = (r - i + 1) * dm[:, :r] <= suffix[:, :r] * (1.0 + SPLIT_SLACK)
        m = np.argmax(cond, axis=1) + 1
        k = r - m + 1
        s1 = suffix[np.arange(dm.shape[0]), m - 1]
        pos = np.arange(q)[None, :]
        in_tail = pos >= (m - 1)[:, None]
        w = np.clip(dm * (k / s1)[:, None], 0.0, 1.0)
        z0 = np.where(in_tail, np.sqrt(np.clip(1.0 - w, 0.0, None)), 0.0)
        z0 /= np.linalg.norm(z0, axis=1, keepdims=True)
        # reflector mapping e_m to z0; identity on the head coordinates
        e = (pos == (m - 1)[:, None]).astype(float)
        wv = z0 + e
        h = np.eye(q) - 2.0 * wv[:, :, None] * wv[:, None, :] / np.sum(wv * wv, axis=1)[:, None, None]
        keep = np.argsort(pos == (m - 1)[:, None], axis=1, kind="stable")[:, :r]
        frame = np.take_along_axis(h, keep[:, None, :], axis=2)
        scale = np.where(in_tail, np.sqrt(s1 / k)[:, None], np.sqrt(dm))
        col_scale = np.take_along_axis(scale, keep, axis=1)
        s = np.where(in_tail, signs[mixed], 1.0)
        l0[mixed] = s[:, :, None] * frame * col_scale[:, None, :]
    return u @ l0, v @ l0


def opt_bias_batched(c, r):
    """Vectorised Eckart-Young truncation of ``c[b, q, q]`` to rank ``r``."""
    u, d, v = smalllin.batched_svd(c)
    root = np.sqrt(d[:, :r])
    return u[:, :, :r] * root[:, None, :], v[:, :, :r] * root[:, None, :]
