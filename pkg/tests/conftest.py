import math

import numpy as np
import pytest

from tndtmle.data import Dataset, Schema
from tndtmle.simulation import SimConfig, run_monte_carlo

MC_SEED = 20240101
LOG07 = math.log(0.7)

_MC_CACHE = {}


def monte_carlo(**kwargs):
    """Run (or reuse) a Monte Carlo scenario; shared across test modules in a session."""
    kwargs.setdefault("seed", MC_SEED)
    cfg = SimConfig(**kwargs)
    if cfg not in _MC_CACHE:
        _MC_CACHE[cfg] = run_monte_carlo(cfg, workers=1)
    return _MC_CACHE[cfg]


@pytest.fixture(scope="session")
def mc():
    return monte_carlo


def table_dataset(counts, x=None, schema=()):
    """Fully observed dataset from ``{(y, a): count}``."""
    y, a = [], []
    for (yy, aa), c in counts.items():
        y += [yy] * c
        a += [aa] * c
    n = len(y)
    x = np.empty((n, 0)) if x is None else x
    return Dataset.from_arrays(np.ones(n, dtype=int), np.array(a, float), np.array(y), x, Schema.from_spec(schema))


# Y=1: A=1 30, A=0 10; Y=0: A=1 20, A=0 40.
SATURATED = {(1, 1): 30, (1, 0): 10, (0, 1): 20, (0, 0): 40}


@pytest.fixture
def saturated():
    return table_dataset(SATURATED)


def synthetic_dataset(n=400, seed=0, beta=0.5, missing=0.3):
    """Small dataset from a partially linear exposure model with two covariates."""
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    x2 = (rng.random(n) < 0.4).astype(float)
    y = (rng.random(n) < 0.35).astype(int)
    eta = y * beta + 0.4 * x1 - 0.5 * x2 + 0.3 * np.maximum(x1, 0)
    a = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    delta = (rng.random(n) > missing).astype(int)
    delta[:4] = 1
    y[:2], y[2:4] = 1, 0
    return Dataset.from_arrays(delta, a, y, np.column_stack([x1, x2]),
                               {"x1": "continuous", "x2": "binary"})


@pytest.fixture
def synth():
    return synthetic_dataset()


# Acceptance verdicts, echoed in the terminal summary.
ACCEPTANCE: dict[str, str] = {}


def record_criterion(cid: str, ok: bool, detail: str) -> None:
    line = f"{cid} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[cid] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
            terminalreporter.write_line(ACCEPTANCE[cid])
