"""Dense linear algebra for small matrices.

Everything here operates on matrices of dimension at most a few hundred. The
SVD is a one-sided (Hestenes) Jacobi iteration, vectorised over any leading
batch axes so that the training loop can decompose one small coefficient
matrix per batch lane in a single call.
"""

from dataclasses import dataclass

import numba
import numpy as np

MAX_SWEEPS = 100
OFFDIAG_TOL = 1e-12
RANK_TOL = 1e-10


class ConvergenceError(ArithmeticError):
    """Raised when the Jacobi iteration does not converge within the sweep cap."""

    def __init__(self, sweeps):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps")
        self.sweeps = sweeps


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    d: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        m, n = self.u.shape[0], self.v.shape[0]
        s = np.zeros((m, n))
        k = len(self.d)
        s[:k, :k] = np.diag(self.d)
        return self.u @ s @ self.v.T


def as_mat(c, name="matrix"):
    c = np.asarray(c, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {c.shape}")
    if c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(c)):
        raise ValueError(f"{name} contains NaN or Inf")
    return c


@numba.njit(cache=True)
def _jacobi_kernel(a, v, max_sweeps, tol):
    """One-sided Jacobi on each ``a[b]`` (m x n, m >= n), accumulating rotations in ``v[b]``.

    Returns the largest number of sweeps any matrix needed, or -1 on non-convergence.
    """
    nb, m, n = a.shape
    tiny = 2.2250738585072014e-308
    worst = 0
    for b in range(nb):
        scale2 = 0.0
        for i in range(m):
            for j in range(n):
                scale2 += a[b, i, j] * a[b, i, j]
        floor = tol * tol * scale2 + tiny
        converged = False
        sweep = 0
        while sweep < max_sweeps:
            sweep += 1
            rotated = False
            for i in range(n - 1):
                for j in range(i + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for k in range(m):
                        x = a[b, k, i]
                        y = a[b, k, j]
                        alpha += x * x
                        beta += y * y
                        gamma += x * y
                    # relative orthogonality test plus an absolute floor tied to the input norm
                    if abs(gamma) <= max(tol * np.sqrt(alpha) * np.sqrt(beta), floor):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta == 0.0:
                        t = 1.0
                    else:
                        t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = c * t
                    for k in range(m):
                        x = a[b, k, i]
                        y = a[b, k, j]
                        a[b, k, i] = c * x - s * y
                        a[b, k, j] = s * x + c * y
                    for k in range(n):
                        x = v[b, k, i]
                        y = v[b, k, j]
                        v[b, k, i] = c * x - s * y
                        v[b, k, j] = s * x + c * y
            if not rotated:
                converged = True
                break
        if not converged:
            return -1
        worst = max(worst, sweep)
    return worst


def _jacobi_columns(a, max_sweeps, tol):
    """Orthogonalise the columns of ``a[..., m, n]`` in place; return the right rotation ``v``."""
    m, n = a.shape[-2:]
    flat = a.reshape((-1, m, n))
    v = np.broadcast_to(np.eye(n), (flat.shape[0], n, n)).copy()
    if _jacobi_kernel(flat, v, max_sweeps, tol) < 0:
        raise ConvergenceError(max_sweeps)
    a[...] = flat.reshape(a.shape)
    return v.reshape(a.shape[:-2] + (n, n))


def batched_svd(c, max_sweeps=MAX_SWEEPS, tol=OFFDIAG_TOL):
    """Thin SVD of ``c[..., m, n]`` with singular values sorted non-increasing.

    Returns ``(u, d, v)`` with ``u[..., m, k]``, ``d[..., k]``, ``v[..., n, k]``
    and ``k = min(m, n)``. Columns of ``u`` belonging to zero singular values
    are left at zero; callers needing a full orthogonal basis use :func:`svd`.
    """
    c = np.asarray(c, dtype=float)
    m, n = c.shape[-2:]
    if m < n:
        v, d, u = batched_svd(np.swapaxes(c, -1, -2), max_sweeps, tol)
        return u, d, v
    a = np.ascontiguousarray(c, dtype=np.float64).copy()
    # unit max-entry scaling keeps tiny or huge inputs away from under/overflow
    scale = np.max(np.abs(a), axis=(-2, -1), keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    a /= scale
    v = _jacobi_columns(a, max_sweeps, tol)
    d = np.sqrt(np.einsum("...ij,...ij->...j", a, a))
    order = np.argsort(-d, axis=-1, kind="stable")
    d = np.take_along_axis(d, order, axis=-1)
    a = np.take_along_axis(a, order[..., None, :], axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    dmax = d[..., :1]
    live = d > np.maximum(dmax * max(m, n) * np.finfo(float).eps, np.finfo(float).tiny)
    u = np.where(live[..., None, :], a / np.where(live, d, 1.0)[..., None, :], 0.0)
    d = np.where(live, d, 0.0) * scale[..., 0]
    return u, d, v


def _complete_columns(q, dim):
    """Extend orthonormal columns ``q[dim, k]`` to a square orthogonal matrix."""
    live = np.linalg.norm(q, axis=0) > 0.5
    out = np.zeros((dim, dim))
    k = int(np.sum(live))
    out[:, :k] = q[:, live]
    if k < dim:
        onb, _, _ = gram_schmidt(list(out[:, :k].T) + list(np.eye(dim)))
        out[:, k:] = np.array(onb[k:dim]).T
    return out


def svd(c, max_sweeps=MAX_SWEEPS, tol=OFFDIAG_TOL):
    """Full SVD ``c = u @ diag(d) @ v.T`` with orthogonal ``u`` (m x m) and ``v`` (n x n).

    Raises :class:`ConvergenceError` if the iteration cap is hit.
    """
    c = as_mat(c)
    m, n = c.shape
    u, d, v = batched_svd(c, max_sweeps, tol)
    u = _complete_columns(u, m)
    v = _complete_columns(v, n)
    return SvdResult(u=u, d=d, v=v)


def householder_basis(z0, pivot=0):
    """Orthogonal matrix whose column ``pivot`` is ``+-z0``; the other columns are orthogonal to ``z0``.

    ``z0[..., n]`` must be unit length. Works on batches.
    """
    z0 = np.asarray(z0, dtype=float)
    n = z0.shape[-1]
    e = np.zeros(n)
    e[pivot] = 1.0
    sign = np.where(z0[..., pivot:pivot + 1] < 0, -1.0, 1.0)
    w = z0 + sign * e
    ww = np.einsum("...i,...i->...", w, w)[..., None, None]
    return np.eye(n) - 2.0 * w[..., :, None] * w[..., None, :] / ww


def complete_onb(z0):
    """Return ``n - 1`` vectors which together with unit vector ``z0`` form an orthonormal basis."""
    z0 = np.asarray(z0, dtype=float).ravel()
    if z0.size < 1 or not np.all(np.isfinite(z0)):
        raise ValueError("z0 must be a finite non-empty vector")
    if abs(np.linalg.norm(z0) - 1.0) > 1e-8:
        raise ValueError(f"z0 must be a unit vector, has norm {np.linalg.norm(z0):.3g}")
    h = householder_basis(z0)
    return [h[:, i] for i in range(1, z0.size)]


@numba.njit(cache=True)
def _mgs_kernel(x, onb, rel_tol):
    """Modified Gram-Schmidt with one re-orthogonalisation pass on each ``x[b]`` (q x dim)."""
    nb, q, dim = x.shape
    w = np.empty(dim)
    for b in range(nb):
        cutoff = 0.0
        for j in range(q):
            s = 0.0
            for k in range(dim):
                s += x[b, j, k] * x[b, j, k]
            cutoff = max(cutoff, np.sqrt(s))
        cutoff *= rel_tol
        for j in range(q):
            for k in range(dim):
                w[k] = x[b, j, k]
            for _ in range(2):
                for i in range(j):
                    proj = 0.0
                    for k in range(dim):
                        proj += onb[b, i, k] * w[k]
                    for k in range(dim):
                        w[k] -= proj * onb[b, i, k]
            s = 0.0
            for k in range(dim):
                s += w[k] * w[k]
            nw = np.sqrt(s)
            if nw > cutoff and nw > 0.0:
                for k in range(dim):
                    onb[b, j, k] = w[k] / nw


def gram_schmidt_padded(vectors, rel_tol=RANK_TOL):
    """Batched modified Gram-Schmidt with one re-orthogonalisation pass.

    ``vectors[..., q, dim]`` are the inputs. Returns ``(onb, coeffs, rank)``
    where ``onb[..., q, dim]`` holds the basis in input order with zero rows
    for inputs that added no new direction, ``coeffs[..., q, q]`` satisfies
    ``coeffs[i, j] = <onb_i, input_j>`` and ``rank[...]`` counts non-zero rows.
    """
    x = np.asarray(vectors, dtype=float)
    q, dim = x.shape[-2:]
    flat = np.ascontiguousarray(x.reshape(-1, q, dim))
    onb = np.zeros_like(flat)
    _mgs_kernel(flat, onb, rel_tol)
    onb = onb.reshape(x.shape)
    coeffs = onb @ np.swapaxes(x, -1, -2)
    rank = np.sum(np.any(onb != 0, axis=-1), axis=-1)
    return onb, coeffs, rank


def gram_schmidt(vectors, rel_tol=RANK_TOL):
    """Orthonormal basis of ``span(vectors)``.

    Returns ``(onb, coeffs, effective_rank)`` where ``onb`` is a list of basis
    vectors and ``coeffs[i][j] = <onb_i, vectors_j>``, so that
    ``vectors_j = sum_i coeffs[i][j] * onb_i``.
    """
    vectors = [np.asarray(v, dtype=float).ravel() for v in vectors]
    if not vectors:
        raise ValueError("gram_schmidt needs at least one vector")
    dims = {v.size for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"vectors must share one dimension, got {sorted(dims)}")
    onb, coeffs, rank = gram_schmidt_padded(np.stack(vectors), rel_tol)
    keep = np.any(onb != 0, axis=-1)
    return list(onb[keep]), coeffs[keep], int(rank)


def givens(phi):
    """2 x 2 rotation ``[[cos, sin], [-sin, cos]]``."""
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, s], [-s, c]])


def rotate_pair(vectors, i, j, phi):
    """Apply the Givens rotation on coordinates ``(i, j)`` to every row of ``vectors``."""
    out = np.array(vectors, dtype=float, copy=True)
    c, s = np.cos(phi), np.sin(phi)
    xi = out[..., i].copy()
    xj = out[..., j].copy()
    out[..., i] = c * xi + s * xj
    out[..., j] = -s * xi + c * xj
    return out
