"""Single-layer Recurrent Highway cell with exact forward-mode and reverse-mode gradients.

The cell reads ``h_hat = [h_prev, onehot(x), 1]`` (length ``p = n + n_in + 1``)
and computes

    g = 2 sigmoid(h_hat W_g) - 1
    t = sigmoid(h_hat W_t)
    h = t * g + (1 - t) * h_prev

The recurrent parameters are stacked as ``theta = [W_g | W_t]`` (``p x 2n``,
flattened row-major), so the sensitivity matrix ``G = dh/dtheta`` has shape
``n x (p * 2n)`` and the immediate Jacobian factors as ``h_hat (x) [D1 | D2]``
with two diagonal blocks. Every function accepts arbitrary leading batch axes.
"""

from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1
INIT_SCALE = 0.1


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class RhnParams:
    w_g: np.ndarray
    w_t: np.ndarray
    w_out: np.ndarray
    n_in: int

    def __post_init__(self):
        p, n = self.w_g.shape
        if self.w_t.shape != (p, n):
            raise ValueError(f"w_t shape {self.w_t.shape} != w_g shape {(p, n)}")
        if p != n + self.n_in + 1:
            raise ValueError(f"expected {n + self.n_in + 1} input rows, got {p}")
        if self.w_out.ndim != 2 or self.w_out.shape[0] != n + 1:
            raise ValueError(f"w_out must have {n + 1} rows (hidden + bias), got {self.w_out.shape}")
        for name in ("w_g", "w_t", "w_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains NaN or Inf")

    @property
    def n(self):
        return self.w_g.shape[1]

    @property
    def p(self):
        return self.w_g.shape[0]

    @property
    def v(self):
        return self.w_out.shape[1]

    @property
    def theta(self):
        """Recurrent parameters as one ``p x 2n`` matrix."""
        return np.hstack([self.w_g, self.w_t])

    def copy(self):
        return RhnParams(self.w_g.copy(), self.w_t.copy(), self.w_out.copy(), self.n_in)

    def arrays(self):
        return {"w_g": self.w_g, "w_t": self.w_t, "w_out": self.w_out}


def init_params(n, n_in, v, rng, scale=INIT_SCALE, carry_bias=0.0):
    """Uniform ``[-scale, scale]`` weights, zero biases except the optional transform-gate bias."""
    p = n + n_in + 1
    w_g = rng.uniform(-scale, scale, size=(p, n))
    w_t = rng.uniform(-scale, scale, size=(p, n))
    w_out = rng.uniform(-scale, scale, size=(n + 1, v))
    w_g[-1] = 0.0
    w_t[-1] = carry_bias
    w_out[-1] = 0.0
    return RhnParams(w_g, w_t, w_out, n_in)


@dataclass
class RhnStep:
    h_prev: np.ndarray
    h_next: np.ndarray
    h_hat: np.ndarray
    g: np.ndarray
    t_gate: np.ndarray
    sig_g: np.ndarray


def make_h_hat(h_prev, x, n_in):
    """Concatenate hidden state, one-hot input and the bias unit.

    ``x`` is an integer id array with the leading shape of ``h_prev`` or an
    explicit one-hot/real input of width ``n_in``.
    """
    h_prev = np.asarray(h_prev, dtype=float)
    x = np.asarray(x)
    if np.issubdtype(x.dtype, np.integer):
        if np.any((x < 0) | (x >= n_in)):
            raise ValueError(f"input id out of range [0, {n_in})")
        xin = np.zeros(h_prev.shape[:-1] + (n_in,))
        np.put_along_axis(xin, x[..., None], 1.0, axis=-1)
    else:
        xin = np.broadcast_to(x.astype(float), h_prev.shape[:-1] + (n_in,))
    ones = np.ones(h_prev.shape[:-1] + (1,))
    return np.concatenate([h_prev, xin, ones], axis=-1)


def forward(params, h_prev, x):
    h_prev = np.asarray(h_prev, dtype=float)
    if h_prev.shape[-1] != params.n:
        raise ValueError(f"hidden size {h_prev.shape[-1]} != {params.n}")
    h_hat = make_h_hat(h_prev, x, params.n_in)
    sig_g = sigmoid(h_hat @ params.w_g)
    t = sigmoid(h_hat @ params.w_t)
    g = 2.0 * sig_g - 1.0
    h = t * g + (1.0 - t) * h_prev
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite hidden state")
    return RhnStep(h_prev=h_prev, h_next=h, h_hat=h_hat, g=g, t_gate=t, sig_g=sig_g)


def immediate_factor(step):
    """Diagonals ``(D1, D2)`` of ``dh/d(h_hat W_g)`` and ``dh/d(h_hat W_t)``.

    Together with ``step.h_hat`` they give ``dh/dtheta = h_hat (x) [diag(D1) | diag(D2)]``.
    """
    t = step.t_gate
    d1 = t * 2.0 * step.sig_g * (1.0 - step.sig_g)
    d2 = (step.g - step.h_prev) * t * (1.0 - t)
    return d1, d2


def d_block(d1, d2):
    """Materialise ``[diag(D1) | diag(D2)]`` with shape ``(..., n, 2n)``."""
    n = d1.shape[-1]
    out = np.zeros(d1.shape[:-1] + (n, 2 * n))
    idx = np.arange(n)
    out[..., idx, idx] = d1
    out[..., idx, n + idx] = d2
    return out


def jacobian_h(step, params):
    """``H = dh_next / dh_prev`` with shape ``(..., n, n)``."""
    n = params.n
    d1, d2 = immediate_factor(step)
    h = d1[..., :, None] * params.w_g[:n].T + d2[..., :, None] * params.w_t[:n].T
    idx = np.arange(n)
    h[..., idx, idx] += 1.0 - step.t_gate
    return h


def apply_jacobian_t(step, params, delta):
    """``delta @ H`` without forming ``H``; used by backpropagation."""
    n = params.n
    d1, d2 = immediate_factor(step)
    return delta * (1.0 - step.t_gate) + (delta * d1) @ params.w_g[:n].T + (delta * d2) @ params.w_t[:n].T


def immediate_dense(step):
    """Dense ``F = h_hat (x) [D1 | D2]`` with shape ``(..., n, p * 2n)``."""
    d1, d2 = immediate_factor(step)
    blk = d_block(d1, d2)
    out = step.h_hat[..., None, :, None] * blk[..., :, None, :]
    return out.reshape(blk.shape[:-2] + (blk.shape[-2], -1))


def rtrl_step(g_mat, h_jac, f_dense):
    """One exact sensitivity update ``G <- H G + F``."""
    return h_jac @ g_mat + f_dense


def contract_dense(dl_dh, g_mat, params):
    """``dl_dh @ G`` reshaped into ``(dW_g, dW_t)``."""
    flat = np.einsum("...j,...jk->...k", dl_dh, g_mat)
    theta = flat.reshape(flat.shape[:-1] + (params.p, 2 * params.n))
    return theta[..., :params.n], theta[..., params.n:]


def directional_derivative(params, h_prev, x, b, rel_eps=1e-5):
    """Central-difference estimate of ``H b`` using two extra cell evaluations.

    ``b`` may carry extra axes between the batch axes of ``h_prev`` and the
    hidden axis, e.g. ``h_prev[B, n]`` with ``b[B, r, n]``.
    """
    h_prev = np.asarray(h_prev, dtype=float)
    b = np.asarray(b, dtype=float)
    extra = b.ndim - h_prev.ndim
    hp = h_prev.reshape(h_prev.shape[:-1] + (1,) * extra + h_prev.shape[-1:])
    xx = np.asarray(x)
    if np.issubdtype(xx.dtype, np.integer):
        xx = np.broadcast_to(xx.reshape(xx.shape + (1,) * extra), b.shape[:-1])
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    safe = np.where(nb > 0, nb, 1.0)
    bhat = b / safe
    eps = rel_eps * np.maximum(np.linalg.norm(hp, axis=-1, keepdims=True), 1.0)
    plus = forward(params, hp + eps * bhat, xx).h_next
    minus = forward(params, hp - eps * bhat, xx).h_next
    return np.where(nb > 0, (plus - minus) / (2.0 * eps) * nb, 0.0)


def log_softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def output_head(params, h, target, weight=None):
    """Cross-entropy (nats) of ``target`` under the softmax head and its gradients.

    Returns ``(loss, dl_dh, dw_out)`` where ``loss`` is the weighted sum over
    lanes, ``dl_dh`` has the shape of ``h`` and ``dw_out`` sums over lanes.
    """
    h = np.asarray(h, dtype=float)
    target = np.asarray(target)
    if weight is None:
        weight = np.ones(h.shape[:-1])
    hb = np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)
    logp = log_softmax(hb @ params.w_out)
    nll = -np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, target[..., None], np.take_along_axis(dlogits, target[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= weight[..., None]
    dl_dh = dlogits @ params.w_out[:-1].T
    dw_out = hb.reshape(-1, hb.shape[-1]).T @ dlogits.reshape(-1, dlogits.shape[-1])
    return float(np.sum(weight * nll)), dl_dh, dw_out


def tbptt_gradient(params, inputs, h_init, targets, weights=None, resets=None):
    """Exact gradient of the summed window loss, with ``dL/dh`` cut at the window start.

    ``inputs`` and ``targets`` are ``(T, ...)`` id arrays, ``h_init`` has shape
    ``(..., n)``. ``resets[t]`` zeroes the hidden state of the marked lanes
    before step ``t``, which also stops the backward flow there. Returns ``(loss, grads, h_last)`` where ``grads`` maps
    ``w_g``, ``w_t`` and ``w_out`` to gradients summed over the batch axes.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.shape[0] == 0:
        raise ValueError("window must be non-empty")
    if weights is None:
        weights = np.ones(inputs.shape, dtype=float)
    steps, dls = [], []
    h = np.asarray(h_init, dtype=float)
    loss = 0.0
    dw_out = np.zeros_like(params.w_out)
    if resets is None:
        resets = np.zeros(inputs.shape, dtype=bool)
    keep = 1.0 - np.asarray(resets, dtype=float)[..., None]
    for t in range(inputs.shape[0]):
        h = h * keep[t]
        st = forward(params, h, inputs[t])
        l, dl_dh, dwo = output_head(params, st.h_next, targets[t], weights[t])
        loss += l
        dw_out += dwo
        steps.append(st)
        dls.append(dl_dh)
        h = st.h_next
    dw_g = np.zeros_like(params.w_g)
    dw_t = np.zeros_like(params.w_t)
    delta = np.zeros_like(h)
    for t in reversed(range(inputs.shape[0])):
        st = steps[t]
        delta = delta + dls[t]
        d1, d2 = immediate_factor(st)
        hh = st.h_hat.reshape(-1, params.p).T
        dw_g += hh @ (delta * d1).reshape(-1, params.n)
        dw_t += hh @ (delta * d2).reshape(-1, params.n)
        delta = apply_jacobian_t(st, params, delta) * keep[t]
    return loss, {"w_g": dw_g, "w_t": dw_t, "w_out": dw_out}, h


def save_checkpoint(path, params, seed=0):
    header = {
        "version": CHECKPOINT_VERSION,
        "n": params.n,
        "n_in": params.n_in,
        "v": params.v,
        "seed": seed,
    }
    text = "".join(f"{k}={v}\n" for k, v in header.items()) + "\n"
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (params.w_g, params.w_t, params.w_out))
    with open(path, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(body)


def load_checkpoint(path):
    """Return ``(params, header)`` from a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing header terminator")
    header = {}
    for line in raw[:sep].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        if not _:
            raise ValueError(f"{path}: malformed header line {line!r}")
        header[key.strip()] = value.strip()
    for key in ("version", "n", "n_in", "v", "seed"):
        if key not in header:
            raise ValueError(f"{path}: header lacks {key}")
    try:
        for key in ("version", "n", "n_in", "v", "seed"):
            header[key] = int(header[key])
    except ValueError as exc:
        raise ValueError(f"{path}: non-integer header field ({exc})") from None
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    n, n_in, v = header["n"], header["n_in"], header["v"]
    p = n + n_in + 1
    data = np.frombuffer(raw[sep + 2:], dtype="<f4").astype(float)
    sizes = [p * n, p * n, (n + 1) * v]
    if data.size != sum(sizes):
        raise ValueError(f"{path}: expected {sum(sizes)} floats, found {data.size}")
    w_g, w_t, w_out = np.split(data, np.cumsum(sizes)[:-1])
    params = RhnParams(w_g.reshape(p, n), w_t.reshape(p, n), w_out.reshape(n + 1, v), n_in)
    return params, header
