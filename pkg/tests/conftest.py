import contextlib
import time

import numpy as np
import pytest

from tslab.activations import ERF
from tslab.population_loss import StudentNet, build_unit_orthonormal_teacher

_ACCEPTANCE_LINES = []


@contextlib.contextmanager
def _criterion(number, title):
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        _ACCEPTANCE_LINES.append((number, f"criterion {number:>2} FAIL  {title} "
                                          f"[{elapsed:.1f}s] {info['detail']} :: {msg}"))
        raise
    elapsed = time.perf_counter() - start
    _ACCEPTANCE_LINES.append((number, f"criterion {number:>2} PASS  {title} "
                                      f"[{elapsed:.1f}s] {info['detail']}"))


@pytest.fixture
def criterion():
    """Context manager recording one pass/fail line per acceptance criterion."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def erf_teacher3():
    return build_unit_orthonormal_teacher(3, 4, ERF)


@pytest.fixture
def make_student():
    def make(rng, n, d, kind=ERF, scale=1.0):
        return StudentNet(scale * rng.standard_normal((d, n)), rng.standard_normal(n), kind)
    return make
