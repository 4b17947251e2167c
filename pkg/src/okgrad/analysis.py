"""Gradient-quality measurements: cosines against exact RTRL and estimator moments."""

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import approximators, rnn

COSINE_FLOOR = 1e-12
FILTER_THRESHOLD = 1e-4
ORACLE_BYTES_CAP = 2 * 1024**3
MAX_ENUMERATION = 2**16
CSV_FIELDS = ("step", "cosine", "true_norm", "approx_norm", "filtered")


def cosine(a, b):
    """Cosine between two gradients, or ``None`` if either norm is below ``1e-12``."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("cosine of non-finite vectors")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < COSINE_FLOOR or nb < COSINE_FLOOR:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class CosineRecord:
    step: int
    cosine: float
    true_norm: float
    approx_norm: float
    filtered: bool


def oracle_bytes(n, n_in, batch=1):
    """Memory of the dense exact-RTRL sensitivity for one run."""
    p = n + n_in + 1
    return 8 * batch * n * p * 2 * n


def noise_protocol(params, algo, inputs, targets, filter_threshold=FILTER_THRESHOLD, seed=0,
                   memory_cap=ORACLE_BYTES_CAP):
    """Run ``algo`` and exact RTRL side by side on one frozen network.

    ``inputs``/``targets`` are id sequences for a single lane. Each step both
    algorithms advance on the same cell step; the cosine between their
    recurrent-parameter gradients of that step's loss is recorded. Steps whose
    true gradient norm is below ``filter_threshold`` are flagged filtered.
    """
    need = oracle_bytes(params.n, params.n_in)
    if need > memory_cap:
        raise MemoryError(f"exact oracle needs {need} bytes, cap is {memory_cap}")
    if isinstance(algo, str):
        algo = approximators.make_algo(algo, params.n, params.n_in, 1, seed)
    exact = approximators.ExactRTRL(params.n, params.n_in, 1, seed=seed)
    h = np.zeros((1, params.n))
    out = []
    for t, (x, y) in enumerate(zip(inputs, targets), start=1):
        step = rnn.forward(params, h, np.array([x]))
        exact.advance(step, params)
        algo.advance(step, params)
        _, dl_dh, _ = rnn.output_head(params, step.h_next, np.array([y]))
        g_true = exact.estimate(dl_dh)
        g_approx = algo.estimate(dl_dh)
        tn = float(np.linalg.norm(g_true))
        an = float(np.linalg.norm(g_approx))
        c = cosine(g_true, g_approx)
        filtered = tn < filter_threshold or c is None
        out.append(CosineRecord(t, float("nan") if c is None else c, tn, an, filtered))
        h = step.h_next
    return out


def mean_cosine(records):
    vals = [r.cosine for r in records if not r.filtered]
    return float(np.mean(vals)) if vals else float("nan")


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_cosine_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([_fmt(r.step), _fmt(r.cosine), _fmt(r.true_norm), _fmt(r.approx_norm), _fmt(r.filtered)])


@dataclass
class Moments:
    mean_error: float
    variance: float
    stderr: float
    samples: int
    exhaustive: bool


def estimator_moments(target, sampler, n_signs=None, n_samples=None, rng=None):
    """Mean error and variance ``E||X - target||^2`` of a random estimator.

    ``sampler(signs)`` maps a vector of ``n_signs`` signs in ``{-1, 1}`` to one
    outcome. With ``2**n_signs <= 65536`` every sign vector is enumerated
    (each equally likely); otherwise ``n_samples`` Monte-Carlo draws from
    ``rng`` are used and the standard error of the variance is reported.
    ``mean_error`` is the largest absolute deviation of the mean from
    ``target`` relative to ``max(1, max|target|)``.
    """
    target = np.asarray(target, dtype=float)
    n_signs = 0 if n_signs is None else int(n_signs)
    exhaustive = 2**n_signs <= MAX_ENUMERATION and n_samples is None
    if exhaustive:
        draws = itertools.product((-1.0, 1.0), repeat=n_signs)
    else:
        if rng is None or not n_samples:
            raise ValueError("Monte-Carlo moments need rng and n_samples")
        draws = (rng.integers(0, 2, size=n_signs) * 2.0 - 1.0 for _ in range(n_samples))
    total = np.zeros_like(target)
    sq = []
    count = 0
    for s in draws:
        x = np.asarray(sampler(np.array(s, dtype=float)), dtype=float)
        total += x
        sq.append(float(np.sum((x - target) ** 2)))
        count += 1
    mean = total / count
    scale = max(1.0, float(np.max(np.abs(target)))) if target.size else 1.0
    sq = np.array(sq)
    stderr = 0.0 if exhaustive else float(np.std(sq, ddof=1) / math.sqrt(count)) if count > 1 else float("nan")
    return Moments(float(np.max(np.abs(mean - target)) / scale) if target.size else 0.0,
                   float(np.mean(sq)), stderr, count, exhaustive)


def aggregate(runs):
    """Per-step mean and standard deviation of cosine over repetitions (filtered points skipped)."""
    if not runs:
        return []
    steps = max(len(r) for r in runs)
    rows = []
    for i in range(steps):
        vals = [r[i].cosine for r in runs if i < len(r) and not r[i].filtered]
        if vals:
            rows.append((i + 1, float(np.mean(vals)), float(np.std(vals)), len(vals)))
        else:
            rows.append((i + 1, float("nan"), float("nan"), 0))
    return rows


def write_aggregate_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "mean_cosine", "std_cosine", "count"))
        for step, m, s, c in rows:
            w.writerow([_fmt(step), _fmt(m), _fmt(s), _fmt(c)])
