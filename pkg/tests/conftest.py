import pytest

from aclab import critical_points as cp
from aclab import domain

# varies along the layers only, so the pair stays put and just bends
CONFORMAL = domain.Metric.conformal([(0.2, (0, 1), 0.0), (0.05, (0, 2), 0.3)])


def _pair(metric=None, n=128, eps=0.1):
    g = domain.build_torus_grid(2, (1.0, 1.0), (n, n), metric)
    return cp.solve(g, cp.interface_pair(g, eps), eps, 1e-9)


@pytest.fixture(scope="session")
def flat_pair():
    """Converged two-interface solution, eps = 0.1 on 128^2."""
    return _pair()


@pytest.fixture(scope="session")
def conformal_pair():
    """Same construction under a conformal metric that bends the layers."""
    return _pair(CONFORMAL)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
