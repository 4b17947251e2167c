"""scikit-learn style wrapper around online character-level training."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import rnn, train


class OnlineRHN(BaseEstimator):
    """Next-character RHN trained online with one of the gradient algorithms.

    ``X`` is a string. ``fit`` streams it through ``batch`` lanes for ``steps``
    updates; ``predict_proba`` returns the next-character distribution after
    each position, ``transform`` the hidden states, and ``score`` the negative
    bits per character so that larger is better.
    """

    def __init__(self, algo="ok:2", units=32, batch=4, lr=1e-3, steps=1000, reset_prob=0.01, seed=0):
        self.algo = algo
        self.units = units
        self.batch = batch
        self.lr = lr
        self.steps = steps
        self.reset_prob = reset_prob
        self.seed = seed

    def fit(self, X, y=None):
        text = self._text(X)
        cfg = train.TrainConfig(task="lm", algo=self.algo, units=self.units, batch=self.batch, lr=self.lr,
                                steps=self.steps, seed=self.seed, data="<memory>", eval_every=max(self.steps, 1),
                                reset_prob=self.reset_prob)
        trainer = train.Trainer(cfg, text=text, split_data=False)
        self.records_ = trainer.run()
        if trainer.status == "diverged":
            raise FloatingPointError(f"training diverged: {trainer.error}")
        self.params_ = trainer.params
        self.vocab_ = trainer.task.vocab
        self.classes_ = np.array(self.vocab_.chars)
        return self

    def partial_fit(self, X, y=None):
        if not hasattr(self, "params_"):
            return self.fit(X, y)
        text = self._text(X)
        self.vocab_.encode(text)
        cfg = train.TrainConfig(task="lm", algo=self.algo, units=self.units, batch=self.batch, lr=self.lr,
                                steps=self.steps, seed=self.seed, data="<memory>", eval_every=max(self.steps, 1),
                                reset_prob=self.reset_prob)
        # keep the fitted vocabulary order even if this chunk lacks some characters
        padded = text + "".join(c for c in self.vocab_.chars if c not in set(text))
        trainer = train.Trainer(cfg, params=self.params_, text=padded, split_data=False)
        self.records_ = trainer.run()
        self.params_ = trainer.params
        return self

    def _check(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("OnlineRHN is not fitted yet")

    @staticmethod
    def _text(X):
        if isinstance(X, str):
            text = X
        else:
            text = "".join(np.asarray(X, dtype=str).ravel())
        if len(text) < 2:
            raise ValueError("need at least two characters")
        return text

    def _run(self, X):
        self._check()
        ids = self.vocab_.encode(self._text(X))
        h = np.zeros((1, self.params_.n))
        states, probs = [], []
        for x in ids:
            step = rnn.forward(self.params_, h, np.array([x]))
            h = step.h_next
            hb = np.concatenate([h, np.ones((1, 1))], axis=1)
            probs.append(np.exp(rnn.log_softmax(hb @ self.params_.w_out))[0])
            states.append(h[0])
        return ids, np.array(states), np.array(probs)

    def transform(self, X):
        return self._run(X)[1]

    def predict_proba(self, X):
        return self._run(X)[2]

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def score(self, X, y=None):
        ids, _, probs = self._run(X)
        p = probs[np.arange(ids.size - 1), ids[1:]]
        return float(np.mean(np.log2(p)))
