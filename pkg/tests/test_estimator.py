import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from okgrad import OnlineRHN

TEXT = "abab abba baab " * 30


def test_params_roundtrip_and_clone():
    est = OnlineRHN(algo="kf", units=8, steps=10)
    assert est.get_params()["units"] == 8
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(lr=0.01)
    assert est.lr == 0.01


def test_fit_predict_score():
    est = OnlineRHN(algo="ok:1", units=8, batch=2, steps=400, lr=0.01).fit(TEXT)
    proba = est.predict_proba("abab")
    assert proba.shape == (4, len(est.classes_))
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert est.transform("ab").shape == (2, 8)
    assert set(est.predict("abba")) <= set(est.classes_)
    uniform = -np.log2(len(est.classes_))
    assert est.score(TEXT[:60]) > uniform


def test_partial_fit_keeps_vocab():
    est = OnlineRHN(algo="kf", units=6, batch=1, steps=20).fit(TEXT)
    classes = list(est.classes_)
    est.partial_fit("abab")
    assert list(est.classes_) == classes


def test_unfitted_and_bad_input():
    with pytest.raises(NotFittedError):
        OnlineRHN().predict("ab")
    with pytest.raises(ValueError):
        OnlineRHN(steps=1).fit("a")
    est = OnlineRHN(algo="kf", units=4, steps=5).fit(TEXT)
    with pytest.raises(ValueError):
        est.predict("xyz")
