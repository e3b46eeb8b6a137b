import numpy as np
import pytest

from pdednn.fem import AdvectionDiffusionProblem, NonaffineDiffusionProblem, build_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mesh8():
    return build_mesh(8, 8)


@pytest.fixture(scope="session")
def advdiff8(mesh8):
    return AdvectionDiffusionProblem(mesh8)


@pytest.fixture(scope="session")
def nonaffine16():
    return NonaffineDiffusionProblem(build_mesh(16, 16))


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report(pytestconfig):
    """Callable ``report(n, ok, detail)`` recording one line per criterion."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append((n, line))
        with capman.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
