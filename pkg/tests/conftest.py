import numpy as np
import pytest

from xmodalseg.tensor_io import make_rng, softmax_channels


@pytest.fixture
def rng():
    return make_rng(1234)


def random_simplex(rng, n_cls, h, w, scale=2.0):
    return softmax_channels(rng.normal(size=(n_cls, h, w)) * scale)


def random_labels(rng, n_cls, h, w, ignore_frac=0.0):
    labels = rng.integers(0, n_cls, size=(h, w)).astype(np.uint16)
    labels[rng.random((h, w)) < ignore_frac] = 65535
    return labels


_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(n, ok, detail)``."""
    def _report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
