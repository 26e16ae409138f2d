import numpy as np
import pytest

from schfilter.grid import Mesh, assemble
from schfilter.sch_dynamics import SchModel, SchParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mesh():
    return Mesh(40.0, 100)


@pytest.fixture(scope="session")
def ops(mesh):
    return assemble(mesh)


@pytest.fixture(scope="session")
def model(mesh, ops):
    return SchModel(mesh, SchParams(), ops=ops)


@pytest.fixture(scope="session")
def small_model():
    mesh = Mesh(40.0, 16)
    return SchModel(mesh, SchParams(n_steps_per_window=2))


def dense(op):
    return op.toarray() if hasattr(op, "toarray") else np.asarray(op)


_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _VERDICTS[number] = line
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
