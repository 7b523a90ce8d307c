import numpy as np
import pytest

from dbcd.numerics import seeded_rng


@pytest.fixture
def rng():
    return seeded_rng(12345)


def assert_close(a, b, tol=1e-12):
    np.testing.assert_allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=0, atol=tol)


CRITERIA = {}


def record_criterion(number, title, status, detail):
    CRITERIA[number] = f"criterion {number:>2} {status:<4} {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
