"""Online gradient algorithms for the RHN cell behind one interface.

Each algorithm keeps, per batch lane, some representation of the sensitivity
``G = dh/dtheta`` (``n x p*2n``). Every time step the trainer calls
:meth:`GradAlgo.advance` with the cell step and then :meth:`GradAlgo.estimate`
with ``dL/dh`` to get a gradient estimate for ``theta = [W_g | W_t]``.

Randomness comes from one counter-based generator per lane keyed by
``(seed, lane)``, so results do not depend on how lanes are scheduled.
"""

import re

import numpy as np

from . import kronsum, lowrank, rnn

ALGO_GRAMMAR = "exact | tbptt:<T> | uoro | kf | kfavg:<r> | ok:<r> | bok:<r> | kfapprox:<r> | ktp:<r>"
_RANKED = {"tbptt", "kfavg", "ok", "bok", "kfapprox", "ktp"}
_PLAIN = {"exact", "uoro", "kf"}


def parse_algo(text):
    """Split an algorithm string into ``(name, r)``; ``r`` is 1 for unranked names."""
    m = re.fullmatch(r"\s*([a-z]+)(?::(\d+))?\s*", str(text))
    if not m:
        raise ValueError(f"bad algorithm {text!r}; expected {ALGO_GRAMMAR}")
    name, r = m.group(1), m.group(2)
    if name in _PLAIN and r is None:
        return name, 1
    if name in _RANKED and r is not None and int(r) >= 1:
        return name, int(r)
    raise ValueError(f"bad algorithm {text!r}; expected {ALGO_GRAMMAR}")


def lane_rngs(seed, batch, stream=0):
    """Independent Philox generators, one per lane, keyed by ``(seed, stream, lane)``."""
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, lane])))
            for lane in range(batch)]


def _lane_signs(rngs, shape):
    return np.stack([g.integers(0, 2, size=shape) * 2.0 - 1.0 for g in rngs])


def _mask(mask, batch):
    if mask is None:
        return np.ones(batch, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != batch:
        raise ValueError(f"reset mask has {mask.size} entries for {batch} lanes")
    return mask


def _norms(x, axes):
    return np.sqrt(np.sum(x * x, axis=axes))


class GradAlgo:
    """Common state handling: dimensions, lane RNGs, and the estimate reduction."""

    name = "base"
    online = True

    def __init__(self, n, n_in, batch=1, r=1, seed=0):
        self.n = int(n)
        self.n_in = int(n_in)
        self.p = self.n + self.n_in + 1
        self.batch = int(batch)
        self.r = int(r)
        self.seed = seed
        self.rngs = lane_rngs(seed, self.batch)
        self.reset()

    @property
    def spec(self):
        return self.name if self.name in _PLAIN else f"{self.name}:{self.r}"

    def _check(self, step, params):
        if params.n != self.n or params.p != self.p:
            raise ValueError(f"{self.spec} was built for n={self.n}, p={self.p}; params have n={params.n}, p={params.p}")
        if step.h_next.shape != (self.batch, self.n):
            raise ValueError(f"expected hidden batch {(self.batch, self.n)}, got {step.h_next.shape}")

    def advance(self, step, params):
        raise NotImplementedError

    def lane_estimate(self, dl_dh):
        """Per-lane gradient estimate with shape ``(batch, p, 2n)``."""
        raise NotImplementedError

    def estimate(self, dl_dh):
        """Gradient estimate for ``[W_g | W_t]`` summed over lanes, shape ``(p, 2n)``."""
        return self.lane_estimate(np.asarray(dl_dh, dtype=float).reshape(self.batch, self.n)).sum(axis=0)

    def reset(self, mask=None):
        raise NotImplementedError

    def state_size(self):
        """Stored reals per lane."""
        raise NotImplementedError

    def state_bytes(self):
        return 8 * self.state_size()


class ExactRTRL(GradAlgo):
    name = "exact"

    def reset(self, mask=None):
        if not hasattr(self, "g_mat"):
            self.g_mat = np.zeros((self.batch, self.n, self.p * 2 * self.n))
        self.g_mat[_mask(mask, self.batch)] = 0.0

    def advance(self, step, params):
        self._check(step, params)
        self.g_mat = rnn.rtrl_step(self.g_mat, rnn.jacobian_h(step, params), rnn.immediate_dense(step))

    def lane_estimate(self, dl_dh):
        flat = np.einsum("bj,bjk->bk", dl_dh, self.g_mat)
        return flat.reshape(self.batch, self.p, 2 * self.n)

    def state_size(self):
        return self.n * self.p * 2 * self.n


class Tbptt(GradAlgo):
    """Truncated backpropagation seen as a sensitivity estimate.

    Keeps the last ``r`` cell steps and backpropagates ``dL/dh`` through
    them on every :meth:`estimate`. The trainer uses window updates instead
    (see :func:`okgrad.rnn.tbptt_gradient`); this form serves the noise
    analysis, where the truncated gradient is compared step by step.
    """

    name = "tbptt"
    online = False

    def reset(self, mask=None):
        if not hasattr(self, "buffer"):
            self.buffer = []
            self.params = None
        m = _mask(mask, self.batch)
        for entry in self.buffer:
            entry[1][m] = 0.0

    def advance(self, step, params):
        self._check(step, params)
        self.params = params
        self.buffer.append((step, np.ones(self.batch)))
        if len(self.buffer) > self.r:
            self.buffer.pop(0)

    def lane_estimate(self, dl_dh):
        out = np.zeros((self.batch, self.p, 2 * self.n))
        delta = np.array(dl_dh, dtype=float)
        for step, alive in reversed(self.buffer):
            delta = delta * alive[:, None]
            d1, d2 = rnn.immediate_factor(step)
            out[:, :, :self.n] += step.h_hat[:, :, None] * (delta * d1)[:, None, :]
            out[:, :, self.n:] += step.h_hat[:, :, None] * (delta * d2)[:, None, :]
            delta = rnn.apply_jacobian_t(step, self.params, delta)
        return out

    def state_size(self):
        return self.r * (self.p + 3 * self.n)


class Uoro(GradAlgo):
    """Rank-one ``u (x) v`` with a random-sign probe of the immediate Jacobian."""

    name = "uoro"

    def reset(self, mask=None):
        if not hasattr(self, "u"):
            self.u = np.zeros((self.batch, self.n))
            self.v = np.zeros((self.batch, self.p * 2 * self.n))
        m = _mask(mask, self.batch)
        self.u[m] = 0.0
        self.v[m] = 0.0

    def advance(self, step, params):
        self._check(step, params)
        nu = _lane_signs(self.rngs, self.n)
        hu = np.einsum("bij,bj->bi", rnn.jacobian_h(step, params), self.u)
        d1, d2 = rnn.immediate_factor(step)
        # nu^T F = h_hat (x) [nu*D1 | nu*D2]
        probe = (step.h_hat[:, :, None] * np.concatenate([nu * d1, nu * d2], axis=1)[:, None, :]).reshape(self.batch, -1)
        eps = 1e-7
        rho0 = np.sqrt((_norms(self.v, 1) + eps) / (_norms(hu, 1) + eps))
        rho1 = np.sqrt((_norms(probe, 1) + eps) / (_norms(nu, 1) + eps))
        self.u = rho0[:, None] * hu + rho1[:, None] * nu
        self.v = self.v / rho0[:, None] + probe / rho1[:, None]

    def lane_estimate(self, dl_dh):
        return (np.sum(dl_dh * self.u, axis=1)[:, None] * self.v).reshape(self.batch, self.p, 2 * self.n)

    def state_size(self):
        return self.n + self.p * 2 * self.n


class KroneckerAlgo(GradAlgo):
    """Shared state ``sum_i u_i (x) A_i`` with ``u_i`` of length ``p`` and ``A_i`` of shape ``n x 2n``."""

    def reset(self, mask=None):
        if not hasattr(self, "us"):
            self.us = np.zeros((self.batch, self.r, self.p))
            self.As = np.zeros((self.batch, self.r, self.n, 2 * self.n))
        m = _mask(mask, self.batch)
        self.us[m] = 0.0
        self.As[m] = 0.0

    def _propagated(self, step, params):
        """``(u_i, H A_i)`` and the fresh term ``(h_hat, [D1 | D2])``."""
        self._check(step, params)
        ha = np.matmul(rnn.jacobian_h(step, params)[:, None], self.As)
        d1, d2 = rnn.immediate_factor(step)
        return ha, step.h_hat, rnn.d_block(d1, d2)

    def lane_estimate(self, dl_dh):
        # sum_i u_i (x) (dl_dh A_i)
        rows = (dl_dh[:, None, None, :] @ self.As)[:, :, 0, :]
        return np.swapaxes(self.us, 1, 2) @ rows

    def state_size(self):
        return self.r * (self.p + 2 * self.n * self.n)

    def as_kronsum(self, lane=0):
        fmt = kronsum.KronFormat(1, self.p, self.n, 2 * self.n)
        return kronsum.KroneckerSum(fmt, [(self.us[lane, i], self.As[lane, i]) for i in range(self.r)])


def _balance_pairs(u, a):
    """Rescale each pair ``(u[..], a[..])`` so both factors share one norm; zero pairs untouched."""
    nu = _norms(u, -1)
    na = _norms(a.reshape(a.shape[:u.ndim - 1] + (-1,)), -1)
    ok = (nu > 0) & (na > 0)
    s = np.sqrt(np.where(ok, na, 1.0) / np.where(ok, nu, 1.0))
    u = u * s[..., None]
    a = a / s.reshape(s.shape + (1,) * (a.ndim - s.ndim))
    return u, a


class KfAvg(GradAlgo):
    """``r`` independent single-product estimators stored as one ``r``-term sum.

    Term ``i`` is copy ``i`` divided by ``r``; the fresh term is split evenly
    and sign-mixed into every copy. ``r = 1`` is plain Kronecker-factored RTRL.
    """

    name = "kfavg"
    reset = KroneckerAlgo.reset
    lane_estimate = KroneckerAlgo.lane_estimate
    state_size = KroneckerAlgo.state_size
    as_kronsum = KroneckerAlgo.as_kronsum
    _propagated = KroneckerAlgo._propagated

    def _fresh(self, step, h_hat, blk):
        return h_hat, blk

    def advance(self, step, params):
        ha, h_hat, blk = self._propagated(step, params)
        h_hat, blk = self._fresh(step, h_hat, blk)
        u, a = _balance_pairs(self.us, ha)
        h, d = _balance_pairs(h_hat, blk / self.r)
        c = _lane_signs(self.rngs, self.r)
        self.us = u + c[:, :, None] * h[:, None, :]
        self.As = a + c[:, :, None, None] * d[:, None]


class Kf(KfAvg):
    name = "kf"

    def __init__(self, n, n_in, batch=1, r=1, seed=0):
        super().__init__(n, n_in, batch, 1, seed)


def _diag_lowrank(d1, d2, r, rng):
    """Unbiased minimum-variance rank-``r`` factors of ``[diag(D1) | diag(D2)]``.

    Returns ``(b[r, n], c[r, 2n])`` with ``E[sum_i b_i c_i^T]`` equal to the block.
    The block's singular values are ``sqrt(D1^2 + D2^2)`` with left vectors
    ``e_j`` and right vectors supported on columns ``j`` and ``n + j``.
    """
    n = d1.size
    sig = np.hypot(d1, d2)
    order = np.argsort(-sig, kind="stable")
    sample = lowrank.sample_opt_diag(sig[order], r, rng=rng)
    lf = np.zeros((n, r))
    lf[order] = sample.l
    safe = np.where(sig > 0, sig, 1.0)
    w1 = np.where(sig > 0, d1 / safe, 0.0)
    w2 = np.where(sig > 0, d2 / safe, 0.0)
    b = lf.T
    c = np.concatenate([b * w1, b * w2], axis=1)
    return b, c


class KfApprox(Kf):
    """Kronecker-factored RTRL whose fresh term uses a random rank-``r`` stand-in for ``[D1 | D2]``."""

    name = "kfapprox"

    def __init__(self, n, n_in, batch=1, r=1, seed=0):
        self.approx_rank = int(r)
        GradAlgo.__init__(self, n, n_in, batch, 1, seed)
        self.diag_rngs = lane_rngs(seed, self.batch, stream=1)

    @property
    def spec(self):
        return f"{self.name}:{self.approx_rank}"

    def _fresh(self, step, h_hat, blk):
        d1, d2 = rnn.immediate_factor(step)
        out = np.empty_like(blk)
        for lane in range(self.batch):
            b, c = _diag_lowrank(d1[lane], d2[lane], self.approx_rank, self.diag_rngs[lane])
            out[lane] = b.T @ c
        return h_hat, out


class Ok(KroneckerAlgo):
    """``r``-term Kronecker sum compressed back from ``r + 1`` terms with minimum variance."""

    name = "ok"
    biased = False

    def advance(self, step, params):
        ha, h_hat, blk = self._propagated(step, params)
        us = np.concatenate([self.us, h_hat[:, None]], axis=1)
        As = np.concatenate([ha, blk[:, None]], axis=1).reshape(self.batch, self.r + 1, -1)
        signs = None if self.biased else _lane_signs(self.rngs, self.r + 1)
        nu, na = kronsum.ok_compress_batched(us, As, self.r, signs, biased=self.biased)
        self.us = nu
        self.As = na.reshape(self.batch, self.r, self.n, 2 * self.n)


class BOk(Ok):
    """Deterministic best ``r``-term truncation; biased."""

    name = "bok"
    biased = True


class Ktp(GradAlgo):
    """Sum of ``r`` triple products ``a_i (x) b_i (x) c_i``; ``O(r n)`` state per lane."""

    name = "ktp"

    def __init__(self, n, n_in, batch=1, r=1, seed=0):
        super().__init__(n, n_in, batch, r, seed)
        self.diag_rngs = lane_rngs(seed, self.batch, stream=1)

    def reset(self, mask=None):
        if not hasattr(self, "a"):
            self.a = np.zeros((self.batch, self.r, self.p))
            self.b = np.zeros((self.batch, self.r, self.n))
            self.c = np.zeros((self.batch, self.r, 2 * self.n))
        m = _mask(mask, self.batch)
        self.a[m] = 0.0
        self.b[m] = 0.0
        self.c[m] = 0.0

    def advance(self, step, params):
        self._check(step, params)
        x_in = step.h_hat[:, self.n:self.n + self.n_in]
        hb = rnn.directional_derivative(params, step.h_prev, x_in[:, None, :], self.b)
        d1, d2 = rnn.immediate_factor(step)
        fb = np.empty_like(self.b)
        fc = np.empty_like(self.c)
        for lane in range(self.batch):
            fb[lane], fc[lane] = _diag_lowrank(d1[lane], d2[lane], self.r, self.diag_rngs[lane])
        fa = np.broadcast_to(step.h_hat[:, None, :], self.a.shape)
        a, b, c = _balance_triples(self.a, hb, self.c)
        fa, fb, fc = _balance_triples(fa, fb, fc)
        s = _lane_signs(self.rngs, (self.r, 2))
        s1, s2 = s[..., 0:1], s[..., 1:2]
        self.a = a + s1 * fa
        self.b = b + s2 * fb
        self.c = c + s1 * s2 * fc

    def lane_estimate(self, dl_dh):
        w = np.einsum("bj,brj->br", dl_dh, self.b)
        return np.einsum("br,bra,brc->bac", w, self.a, self.c)

    def state_size(self):
        return self.r * (self.p + self.n + 2 * self.n)

    def as_triplesum(self, lane=0):
        return kronsum.TripleSum([(self.a[lane, i], self.b[lane, i], self.c[lane, i]) for i in range(self.r)])


def _balance_triples(a, b, c):
    na, nb, nc = _norms(a, -1), _norms(b, -1), _norms(c, -1)
    ok = (na > 0) & (nb > 0) & (nc > 0)
    g = np.cbrt(na * nb * nc)
    sa = np.where(ok, g / np.where(ok, na, 1.0), 1.0)
    sb = np.where(ok, g / np.where(ok, nb, 1.0), 1.0)
    sc = np.where(ok, g / np.where(ok, nc, 1.0), 1.0)
    return a * sa[..., None], b * sb[..., None], c * sc[..., None]


ALGOS = {
    "exact": ExactRTRL,
    "tbptt": Tbptt,
    "uoro": Uoro,
    "kf": Kf,
    "kfavg": KfAvg,
    "ok": Ok,
    "bok": BOk,
    "kfapprox": KfApprox,
    "ktp": Ktp,
}


def make_algo(text, n, n_in, batch=1, seed=0):
    name, r = parse_algo(text)
    return ALGOS[name](n, n_in, batch=batch, r=r, seed=seed)
