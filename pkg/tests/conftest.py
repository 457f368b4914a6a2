import pytest

from drbsde.problems import ItoConstant, Problem, constant_problem, ito_example, benchmark_example
from drbsde.problems import zero_driver


@pytest.fixture
def benchmark():
    return benchmark_example()


@pytest.fixture
def benchmark_short():
    """Benchmark example on a short horizon so that small n satisfy delta * C_g < 1."""
    return benchmark_example(T=0.1)


@pytest.fixture
def ito():
    return ito_example()


@pytest.fixture
def constant():
    return constant_problem(c=1.7)


def flat_problem(lower=0.0, upper=0.0, T=1.0, lam=1.0, driver=None):
    """Constant barriers with an arbitrary driver (zero by default)."""
    return Problem(driver=driver or zero_driver(), lower=ItoConstant(lower, 0.0, 0.0, 0.0),
                   upper=ItoConstant(upper, 0.0, 0.0, 0.0), T=T, lam=lam, name="flat")


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not getattr(module, "RESULTS", None):
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
