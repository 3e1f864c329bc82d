import numpy as np
import pytest

from frailtyreg import Dataset
from frailtyreg.transforms import FrailtyFamily

FAMILIES = [
    FrailtyFamily.gamma(),
    FrailtyFamily.inverse_gaussian(),
    FrailtyFamily.igg(0.3),
    FrailtyFamily.igg(0.8),
    FrailtyFamily.lognormal(),
]


def family_id(f):
    return f.kind if f.kind != "igg" else f"igg{f.alpha:g}"


def random_dataset(rng, n=60, d=2, ties=False, censor=0.3, tau=None):
    """Small right-censored sample with fixed covariates."""
    Z = rng.normal(size=(n, d))
    T = rng.exponential(size=n) / np.exp(Z @ rng.normal(scale=0.5, size=d))
    if ties:
        T = np.ceil(T * 5) / 5
    C = rng.exponential(scale=(1 - censor) / max(censor, 1e-9) if censor > 0 else np.inf, size=n)
    status = (T <= C).astype(int)
    if status.sum() == 0:
        status[0] = 1
    return Dataset.from_arrays(np.minimum(T, C), status, Z, tau=tau)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion and print it."""
    def _report(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
