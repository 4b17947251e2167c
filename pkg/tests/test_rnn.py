import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from okgrad import rnn
from okgrad.rnn import RhnParams


def small_params(seed, n=4, n_in=3, v=3, scale=0.5):
    return rnn.init_params(n, n_in, v, np.random.default_rng(seed), scale=scale)


def seq_loss(params, xs, ys, h0):
    h = h0
    total = 0.0
    for x, y in zip(xs, ys):
        h = rnn.forward(params, h, x).h_next
        total += rnn.output_head(params, h, y)[0]
    return total


def fd_grad(params, name, xs, ys, h0, eps=1e-6):
    arr = params.arrays()[name]
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = seq_loss(params, xs, ys, h0)
        arr[idx] = old - eps
        down = seq_loss(params, xs, ys, h0)
        arr[idx] = old
        out[idx] = (up - down) / (2 * eps)
    return out


def rtrl_grad(params, xs, ys, h0):
    n, p = params.n, params.p
    g = np.zeros((n, p * 2 * n))
    h = h0
    acc = np.zeros((p, 2 * n))
    for x, y in zip(xs, ys):
        stp = rnn.forward(params, h, x)
        g = rnn.rtrl_step(g, rnn.jacobian_h(stp, params), rnn.immediate_dense(stp))
        _, dl_dh, _ = rnn.output_head(params, stp.h_next, y)
        acc += (dl_dh @ g).reshape(p, 2 * n)
        h = stp.h_next
    return acc[:, :n], acc[:, n:]


def test_zero_weight_cell_by_hand():
    params = RhnParams(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((2, 2)), n_in=1)
    stp = rnn.forward(params, np.array([1.0]), np.array(0))
    assert stp.h_next == pytest.approx([0.5])
    d1, d2 = rnn.immediate_factor(stp)
    assert d1 == pytest.approx([0.25])
    assert d2 == pytest.approx([-0.25])
    loss, dl_dh, dw = rnn.output_head(params, stp.h_next, np.array(1))
    assert loss == pytest.approx(np.log(2))
    assert dl_dh == pytest.approx([0.0])
    assert dw[:, 1] == pytest.approx([-0.25, -0.5])


def test_make_h_hat_layout():
    hh = rnn.make_h_hat(np.array([[0.3, -0.2]]), np.array([1]), 3)
    assert np.array_equal(hh, [[0.3, -0.2, 0.0, 1.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        rnn.make_h_hat(np.zeros((1, 2)), np.array([3]), 3)


def test_rtrl_tbptt_fd_agree():
    params = small_params(0)
    rng = np.random.default_rng(1)
    xs = rng.integers(0, 3, 12)
    ys = rng.integers(0, 3, 12)
    h0 = np.zeros(4)
    gg, gt = rtrl_grad(params, xs, ys, h0)
    _, grads, _ = rnn.tbptt_gradient(params, xs, h0, ys)
    assert np.allclose(gg, grads["w_g"], rtol=1e-10, atol=1e-12)
    assert np.allclose(gt, grads["w_t"], rtol=1e-10, atol=1e-12)
    for name in ("w_g", "w_t", "w_out"):
        fd = fd_grad(params, name, xs, ys, h0)
        assert np.linalg.norm(fd - grads[name]) <= 1e-6 * np.linalg.norm(fd)


def test_immediate_factor_matches_fd():
    params = small_params(2)
    h = np.random.default_rng(3).normal(size=4) * 0.5
    stp = rnn.forward(params, h, np.array(1))
    f = rnn.immediate_dense(stp)
    eps = 1e-6
    for name, off in (("w_g", 0), ("w_t", params.n)):
        arr = params.arrays()[name]
        for a, c in np.ndindex(arr.shape):
            old = arr[a, c]
            arr[a, c] = old + eps
            up = rnn.forward(params, h, np.array(1)).h_next
            arr[a, c] = old - eps
            down = rnn.forward(params, h, np.array(1)).h_next
            arr[a, c] = old
            col = a * 2 * params.n + off + c
            assert np.allclose(f[:, col], (up - down) / (2 * eps), atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_directional_derivative_matches_jacobian(seed):
    params = small_params(seed % 97)
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(2, 4)) * 0.5
    b = rng.normal(size=(2, 3, 4))
    x = np.array([0, 2])
    stp = rnn.forward(params, h, x)
    jac = rnn.jacobian_h(stp, params)
    want = np.einsum("bij,brj->bri", jac, b)
    got = rnn.directional_derivative(params, h, x, b)
    assert np.allclose(got, want, atol=1e-8)


def test_directional_derivative_zero_direction():
    params = small_params(0)
    got = rnn.directional_derivative(params, np.zeros((1, 4)), np.array([0]), np.zeros((1, 4)))
    assert np.array_equal(got, np.zeros((1, 4)))


def test_apply_jacobian_t_matches_dense():
    params = small_params(4)
    stp = rnn.forward(params, np.full((1, 4), 0.2), np.array([1]))
    delta = np.arange(4.0)[None]
    assert np.allclose(rnn.apply_jacobian_t(stp, params, delta), delta @ rnn.jacobian_h(stp, params))


def test_resets_cut_backward_flow():
    params = small_params(5)
    xs = np.array([[0], [1], [2], [0]])
    ys = np.array([[1], [2], [0], [1]])
    resets = np.array([[False], [False], [True], [False]])
    _, full, _ = rnn.tbptt_gradient(params, xs, np.zeros((1, 4)), ys, resets=resets)
    _, tail, _ = rnn.tbptt_gradient(params, xs[2:], np.zeros((1, 4)), ys[2:])
    _, head, _ = rnn.tbptt_gradient(params, xs[:2], np.zeros((1, 4)), ys[:2])
    assert np.allclose(full["w_g"], head["w_g"] + tail["w_g"])


def test_params_validation():
    with pytest.raises(ValueError):
        RhnParams(np.zeros((3, 1)), np.zeros((3, 2)), np.zeros((2, 2)), n_in=1)
    with pytest.raises(ValueError):
        RhnParams(np.full((3, 1), np.nan), np.zeros((3, 1)), np.zeros((2, 2)), n_in=1)


def test_forward_rejects_non_finite():
    params = small_params(0)
    params.w_g[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        rnn.forward(params, np.ones(4), np.array(0))


def test_checkpoint_roundtrip(tmp_path):
    params = small_params(7)
    path = tmp_path / "net.ckpt"
    rnn.save_checkpoint(path, params, seed=3)
    back, header = rnn.load_checkpoint(path)
    assert header["seed"] == 3
    for a, b in zip(params.arrays().values(), back.arrays().values()):
        assert np.allclose(a, b, atol=1e-6)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        rnn.load_checkpoint(path)
