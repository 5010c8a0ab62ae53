import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fovseg.synth import make_samples  # noqa: E402
from fovseg.trainer import TrainConfig, fit  # noqa: E402

DESK_SEEDS = (0, 1, 2)
DESK_ITERATIONS = 1000


def desk_data(seed):
    """Eight training and four validation 128x128 synthetic images."""
    samples = make_samples(12, 128, seed=100 + seed)
    return samples[:8], samples[8:]


def desk_config(mode, seed, iterations=DESK_ITERATIONS, **kw):
    base = dict(mode=mode, seed=seed, iterations=iterations, lr0=2e-3, seg_widths=(8, 16, 32), val_every=250)
    base.update(kw)
    return TrainConfig(**base)


class RunCache:
    def __init__(self):
        self.runs = {}
        self.seconds = {}

    def get(self, mode, seed, iterations=DESK_ITERATIONS, validate=True):
        key = (mode, seed, iterations, validate)
        if key not in self.runs:
            train, val = desk_data(seed)
            start = time.perf_counter()
            self.runs[key] = fit(train, val if validate else [], desk_config(mode, seed, iterations))
            self.seconds[key] = time.perf_counter() - start
        return self.runs[key]


@pytest.fixture(scope="session")
def desk_runs():
    return RunCache()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report():
    def add(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
