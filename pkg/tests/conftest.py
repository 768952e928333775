import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cagnn import _kernels  # noqa: E402


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    previous = _kernels.BACKEND
    _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance line: ``criterion(n, ok, detail)``; ok=None means skipped."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {status} | {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
