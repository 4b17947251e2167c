import csv
import math

import numpy as np
import pytest

from okgrad import analysis, rnn


def test_cosine_trivial():
    a = np.array([1.0, 2.0, -1.0])
    assert analysis.cosine(a, a) == pytest.approx(1.0)
    assert analysis.cosine(a, -a) == pytest.approx(-1.0)
    assert analysis.cosine([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert analysis.cosine([0.0, 0.0], a[:2]) is None
    with pytest.raises(ValueError):
        analysis.cosine([np.nan], [1.0])


def _net(n=8, v=5, seed=0):
    return rnn.init_params(n, v, v, np.random.default_rng(seed))


def test_exact_self_comparison_is_one():
    params = _net()
    ids = np.random.default_rng(1).integers(0, 5, 31)
    recs = analysis.noise_protocol(params, "exact", ids[:-1], ids[1:])
    vals = [r.cosine for r in recs if not r.filtered]
    assert vals and np.allclose(vals, 1.0, atol=1e-10)


def test_zero_gradient_steps_filtered():
    params = _net()
    params.w_out[:] = 0.0
    ids = np.zeros(6, dtype=int)
    recs = analysis.noise_protocol(params, "ok:1", ids[:-1], ids[1:])
    assert all(r.filtered for r in recs)
    assert all(math.isnan(r.cosine) for r in recs)


def test_memory_guard():
    params = _net()
    with pytest.raises(MemoryError):
        analysis.noise_protocol(params, "exact", [0], [1], memory_cap=10)


def test_two_ok_near_one_small_net():
    params = _net(16, 10)
    ids = np.random.default_rng(2).integers(0, 10, 41)
    recs = analysis.noise_protocol(params, "ok:2", ids[:-1], ids[1:], seed=3)
    assert analysis.mean_cosine(recs) > 0.95


def test_cosine_csv_format(tmp_path):
    rec = [analysis.CosineRecord(1, 0.1, 1 / 3, 2.0, False), analysis.CosineRecord(2, float("nan"), 0.0, 0.0, True)]
    path = tmp_path / "c.csv"
    analysis.write_cosine_csv(path, rec)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "cosine", "true_norm", "approx_norm", "filtered"]
    assert rows[1] == ["1", "0.10000000000000001", "0.33333333333333331", "2", "0"]
    assert rows[2][4] == "1"


def test_moments_deterministic_sampler():
    m = analysis.estimator_moments(np.eye(2), lambda s: np.eye(2), 3)
    assert m.variance == 0.0 and m.mean_error == 0.0 and m.exhaustive and m.samples == 8


def test_moments_rademacher_sum():
    # X = s1 + s2: mean 0, E X^2 = 2
    m = analysis.estimator_moments(np.zeros(1), lambda s: np.array([s.sum()]), 2)
    assert m.variance == pytest.approx(2.0)
    mc = analysis.estimator_moments(np.zeros(1), lambda s: np.array([s.sum()]), 2,
                                    n_samples=4000, rng=np.random.default_rng(0))
    assert not mc.exhaustive
    assert abs(mc.variance - 2.0) < 5 * mc.stderr


def test_moments_monte_carlo_needs_rng():
    with pytest.raises(ValueError):
        analysis.estimator_moments(np.zeros(1), lambda s: s[:1], 20)


def test_aggregate_skips_filtered():
    r1 = [analysis.CosineRecord(1, 0.5, 1, 1, False), analysis.CosineRecord(2, 0.2, 1, 1, True)]
    r2 = [analysis.CosineRecord(1, 1.0, 1, 1, False), analysis.CosineRecord(2, 0.4, 1, 1, False)]
    rows = analysis.aggregate([r1, r2])
    assert rows[0] == (1, 0.75, 0.25, 2)
    assert rows[1] == (2, 0.4, 0.0, 1)
