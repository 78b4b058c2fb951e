import numpy as np
import pytest
from hypothesis import settings

from synthcace.data import Dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_data(n=200, p=2, pi=0.6, effect=1.0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    z = rng.integers(0, 2, n).astype(float)
    c = (rng.random(n) < pi).astype(float)
    s = z * c
    y = x.sum(axis=1) + effect * s + rng.standard_normal(n)
    return Dataset(y, z, s, x if p else None, tuple(f"x{j + 1}" for j in range(p)))


@pytest.fixture
def iv_example():
    z = [1, 1, 1, 1, 0, 0, 0, 0]
    s = [1, 1, 0, 0, 0, 0, 0, 0]
    y = [5, 3, 2, 2, 1, 1, 1, 1]
    return Dataset(y, z, s)


@pytest.fixture
def data():
    return make_data()


ACCEPTANCE = []


def record(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
