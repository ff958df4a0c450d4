import numpy as np
import pytest

from hygrohom.materials import PhysicalConstants, default_laws

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def constants():
    return PhysicalConstants()


@pytest.fixture
def laws(constants):
    return default_laws(constants)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
