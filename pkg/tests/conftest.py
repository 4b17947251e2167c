import itertools

import numpy as np
import pytest


def all_signs(n):
    """Every vector in {-1, 1}^n, as float arrays."""
    return [np.array(s, dtype=float) for s in itertools.product((-1.0, 1.0), repeat=n)]


def enumerate_moments(target, sampler, n_signs):
    """Exact mean and E||X - target||^2 over all equally likely sign vectors."""
    outs = [np.asarray(sampler(s), dtype=float) for s in all_signs(n_signs)]
    mean = np.mean(outs, axis=0)
    var = float(np.mean([np.sum((o - target) ** 2) for o in outs]))
    return mean, var


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(k, passed, detail)``."""

    def record(k, passed, detail):
        ACCEPTANCE[k] = (bool(passed), detail)
        print(f"criterion {k}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
