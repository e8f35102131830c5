import pytest

from acvtune.models import make_benchmark_ensemble


@pytest.fixture(scope="session")
def analytic():
    return make_benchmark_ensemble({"benchmark": "analytic"})


@pytest.fixture(scope="session")
def traj1d():
    return make_benchmark_ensemble({"benchmark": "trajectory-1d"})


@pytest.fixture(scope="session")
def traj2d():
    return make_benchmark_ensemble({"benchmark": "trajectory-2d"})


_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Log one PASS/FAIL line per exit criterion and echo it at the end of the run."""
    def record(number, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
