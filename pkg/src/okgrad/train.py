"""Training harness: Adam, the Copy task with its curriculum, character-LM streams and the loop."""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import approximators, rnn

LN2 = math.log(2.0)
COPY_ALPHABET = "01#*"
BIT0, BIT1, MARK, BLANK = range(4)
LR_GRID = (10 ** -2.5, 1e-3, 10 ** -3.5, 1e-4)


class Adam:
    """Adam with bias correction over a dict of named arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params, grads):
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}")
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_update(state, params, grad):
    return state.update(params, grad)


def copy_sample(t_max, rng):
    """One Copy-task sequence as ``(inputs, targets, weights, length)``.

    Input is ``#``, ``L`` random bits and ``L + 1`` blanks; the target is
    ``L + 1`` blanks, ``#`` and the same bits. Only the repeated bits carry
    loss weight.
    """
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    length = int(rng.integers(max(1, t_max - 5), t_max + 1))
    bits = rng.integers(0, 2, size=length)
    blanks = np.full(length + 1, BLANK)
    inputs = np.concatenate([[MARK], bits, blanks])
    targets = np.concatenate([blanks, [MARK], bits])
    weights = np.zeros(inputs.size)
    weights[-length:] = 1.0
    return inputs, targets, weights, length


def decode_copy(ids):
    return "".join(COPY_ALPHABET[i] for i in ids)


@dataclass
class CopyCurriculum:
    t_max: int = 1
    error_ema: float = 1.0
    decay: float = 0.99
    threshold: float = 0.15


def curriculum_step(cur, step_bpc):
    if step_bpc < 0:
        raise ValueError("bits per character cannot be negative")
    ema = cur.decay * cur.error_ema + (1.0 - cur.decay) * step_bpc
    if ema < cur.threshold:
        return replace(cur, t_max=cur.t_max + 1, error_ema=1.0)
    return replace(cur, error_ema=ema)


class CharVocab:
    """Sorted unique codepoints of a training text."""

    def __init__(self, text):
        if not text:
            raise ValueError("cannot build a vocabulary from empty text")
        self.chars = sorted(set(text))
        self.index = {c: i for i, c in enumerate(self.chars)}

    def __len__(self):
        return len(self.chars)

    def encode(self, text):
        missing = sorted({c for c in text if c not in self.index})
        if missing:
            listed = ", ".join(f"U+{ord(c):04X}" for c in missing)
            raise ValueError(f"characters outside the vocabulary: {listed}")
        return np.array([self.index[c] for c in text], dtype=np.int64)

    def decode(self, ids):
        return "".join(self.chars[i] for i in ids)


def split_corpus(text, fractions=(0.9, 0.05, 0.05)):
    """Contiguous train/valid/test split."""
    n = len(text)
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    return text[:a], text[a:b], text[b:]


def lm_stream(ids, batch, reset_prob=0.01, rng=None):
    """Yield ``(x, y, reset)`` arrays of length ``batch`` forever.

    Lane ``i`` walks the ``i``-th of ``batch`` equal contiguous slices and
    wraps to the slice start (with a forced reset) at its end. ``reset`` marks
    lanes whose hidden state is zeroed before this step.
    """
    ids = np.asarray(ids)
    span = (ids.size - 1) // batch
    if span < 1:
        raise ValueError(f"corpus of {ids.size} symbols is too short for {batch} lanes")
    if reset_prob > 0 and rng is None:
        raise ValueError("an rng is needed for random resets")
    starts = np.arange(batch) * span
    pos = np.zeros(batch, dtype=np.int64)
    first = True
    while True:
        idx = starts + pos
        if reset_prob >= 1:
            reset = np.ones(batch, dtype=bool)
        elif reset_prob > 0:
            reset = rng.random(batch) < reset_prob
        else:
            reset = np.zeros(batch, dtype=bool)
        reset |= pos == 0
        if first:
            reset[:] = True
            first = False
        yield ids[idx], ids[idx + 1], reset
        pos = (pos + 1) % span


def unigram_bpc(train_ids, eval_ids, v):
    """Cross-entropy in bits of ``eval_ids`` under add-one smoothed training unigram frequencies."""
    counts = np.bincount(train_ids, minlength=v).astype(float) + 1.0
    logp = np.log2(counts / counts.sum())
    return float(-np.mean(logp[eval_ids]))


def evaluate_bpc(params, ids, batch=16):
    """Forward-only bits per character over ``ids`` split into ``batch`` contiguous lanes."""
    ids = np.asarray(ids)
    span = (ids.size - 1) // batch
    if span < 1:
        batch, span = 1, ids.size - 1
    starts = np.arange(batch) * span
    h = np.zeros((batch, params.n))
    total = 0.0
    for t in range(span):
        step = rnn.forward(params, h, ids[starts + t])
        loss, _, _ = rnn.output_head(params, step.h_next, ids[starts + t + 1])
        total += loss
        h = step.h_next
    return total / (span * batch) / LN2


@dataclass
class TrainConfig:
    task: str = "copy"
    algo: str = "ok:4"
    units: int = 64
    batch: int = 16
    lr: float = 1e-3
    steps: int = 1000
    seed: int = 0
    data: str = None
    eval_every: int = 100
    reset_prob: float = 0.01
    init_scale: float = rnn.INIT_SCALE

    def validate(self):
        if self.task not in ("copy", "lm"):
            raise ValueError(f"unknown task {self.task!r}")
        approximators.parse_algo(self.algo)
        for name in ("units", "batch", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be non-negative")
        if not 0.0 <= self.reset_prob <= 1.0:
            raise ValueError("reset_prob must lie in [0, 1]")
        if self.task == "lm" and not self.data:
            raise ValueError("the lm task needs a data file")
        return self


@dataclass
class RunRecord:
    step: int
    loss_bpc: float
    tag: str
    wallclock_s: float
    updates_done: int


class CopyTask:
    """Per-lane Copy-task streams; each lane starts a new sequence as soon as its last one ends."""

    n_symbols = len(COPY_ALPHABET)

    def __init__(self, batch, seed, t_max=1):
        self.batch = batch
        self.rngs = approximators.lane_rngs(seed, batch, stream=2)
        self.curriculum = CopyCurriculum(t_max=t_max)
        self.queues = [None] * batch
        self.pos = np.zeros(batch, dtype=np.int64)
        self.seq_loss = np.zeros(batch)
        self.seq_count = np.zeros(batch)

    def next(self):
        x = np.empty(self.batch, dtype=np.int64)
        y = np.empty(self.batch, dtype=np.int64)
        w = np.empty(self.batch)
        reset = np.zeros(self.batch, dtype=bool)
        for i in range(self.batch):
            if self.queues[i] is None or self.pos[i] >= self.queues[i][0].size:
                self.queues[i] = copy_sample(self.curriculum.t_max, self.rngs[i])
                self.pos[i] = 0
                reset[i] = True
            inp, tgt, wt, _ = self.queues[i]
            x[i], y[i], w[i] = inp[self.pos[i]], tgt[self.pos[i]], wt[self.pos[i]]
        return x, y, w, reset

    def observe(self, nll, w):
        """Account per-lane losses (nats) for this step and advance the curriculum on finished sequences."""
        self.seq_loss += nll * w
        self.seq_count += w
        self.pos += 1
        for i in range(self.batch):
            if self.pos[i] >= self.queues[i][0].size:
                bpc = self.seq_loss[i] / max(self.seq_count[i], 1.0) / LN2
                self.curriculum = curriculum_step(self.curriculum, bpc)
                self.seq_loss[i] = 0.0
                self.seq_count[i] = 0.0

    @property
    def tag(self):
        return str(self.curriculum.t_max)


class LmTask:
    def __init__(self, text, batch, seed, reset_prob, split=True):
        train_text, valid_text, test_text = split_corpus(text) if split else (text, "", "")
        self.vocab = CharVocab(train_text)
        self.train_ids = self.vocab.encode(train_text)
        self.valid_ids = self.vocab.encode(valid_text)
        self.test_ids = self.vocab.encode(test_text)
        self.n_symbols = len(self.vocab)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 3])))
        self.stream = lm_stream(self.train_ids, batch, reset_prob, rng)
        self.batch = batch

    def next(self):
        x, y, reset = next(self.stream)
        return x, y, np.ones(self.batch), reset

    def observe(self, nll, w):
        pass

    @property
    def tag(self):
        return "train"

    def baseline_bpc(self):
        return unigram_bpc(self.train_ids, self.valid_ids, self.n_symbols)


def _per_lane_nll(params, h, y):
    hb = np.concatenate([h, np.ones((h.shape[0], 1))], axis=1)
    logp = rnn.log_softmax(hb @ params.w_out)
    return -logp[np.arange(h.shape[0]), y]


@dataclass
class Trainer:
    """Runs one configuration; iterate :meth:`records` to drive it."""

    config: TrainConfig
    params: rnn.RhnParams = None
    text: str = None
    split_data: bool = True
    status: str = "pending"
    updates: int = 0
    steps_done: int = 0
    error: str = ""
    task: object = field(default=None, repr=False)

    def __post_init__(self):
        cfg = self.config.validate()
        if cfg.task == "copy":
            self.task = CopyTask(cfg.batch, cfg.seed)
        else:
            if self.text is None:
                with open(cfg.data, encoding="utf-8") as fh:
                    self.text = fh.read()
            self.task = LmTask(self.text, cfg.batch, cfg.seed, cfg.reset_prob, self.split_data)
        v = self.task.n_symbols
        if self.params is None:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 4])))
            self.params = rnn.init_params(cfg.units, v, v, rng, scale=cfg.init_scale)
        self.algo = approximators.make_algo(cfg.algo, cfg.units, v, cfg.batch, cfg.seed)
        self.adam = Adam(self.params.arrays(), lr=cfg.lr)
        self.h = np.zeros((cfg.batch, cfg.units))

    @property
    def curriculum(self):
        return getattr(self.task, "curriculum", None)

    def _apply(self, grads):
        arrays = self.params.arrays()
        self.adam.update(arrays, grads)
        self.updates += 1

    def records(self):
        """Train for ``config.steps`` steps, yielding a :class:`RunRecord` every ``eval_every`` steps."""
        cfg = self.config
        B, n = cfg.batch, cfg.units
        window = self.algo.r if not self.algo.online else 0
        buf = []
        acc_loss = 0.0
        acc_count = 0.0
        t0 = time.perf_counter()
        self.status = "running"
        for step in range(1, cfg.steps + 1):
            x, y, w, reset = self.task.next()
            self.h[reset] = 0.0
            try:
                if window:
                    if not buf:
                        h0 = self.h.copy()
                    buf.append((x, y, w, reset))
                st = rnn.forward(self.params, self.h, x)
                nll = _per_lane_nll(self.params, st.h_next, y)
                if not np.all(np.isfinite(nll)):
                    raise FloatingPointError("non-finite loss")
                if self.algo.online:
                    self.algo.reset(reset)
                    self.algo.advance(st, self.params)
                    _, dl_dh, dw_out = rnn.output_head(self.params, st.h_next, y, w)
                    theta = self.algo.estimate(dl_dh) / B
                    self._apply({"w_g": theta[:, :n], "w_t": theta[:, n:], "w_out": dw_out / B})
                elif len(buf) == window:
                    xs, ys, ws, rs = (np.stack(a) for a in zip(*buf))
                    _, grads, _ = rnn.tbptt_gradient(self.params, xs, h0, ys, ws, rs)
                    self._apply({k: g / B for k, g in grads.items()})
                    buf = []
            except FloatingPointError as exc:
                self.status = "diverged"
                self.error = str(exc)
                self.steps_done = step
                yield RunRecord(step, float("nan"), self.task.tag, time.perf_counter() - t0, self.updates)
                return
            self.task.observe(nll, w)
            acc_loss += float(np.sum(nll * w))
            acc_count += float(np.sum(w))
            self.h = st.h_next
            self.steps_done = step
            if step % cfg.eval_every == 0:
                bpc = acc_loss / acc_count / LN2 if acc_count else float("nan")
                yield RunRecord(step, bpc, self.task.tag, time.perf_counter() - t0, self.updates)
                acc_loss = acc_count = 0.0
        self.status = "done"

    def run(self):
        return list(self.records())


def train_loop(config, params=None, text=None):
    """Convenience wrapper: returns ``(records, trainer)``."""
    trainer = Trainer(config, params=params, text=text)
    return trainer.run(), trainer
