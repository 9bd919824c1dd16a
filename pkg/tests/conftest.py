import os

import pytest
from hypothesis import HealthCheck, settings

from phddpg.scenario import generate_grid

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def grid1():
    return generate_grid(1, 1, demand=0)


@pytest.fixture(scope="session")
def net1(grid1):
    return grid1.network


@pytest.fixture(scope="session")
def grid2():
    return generate_grid(2, 2, demand=2400, seed=3)


@pytest.fixture(scope="session")
def arch1(net1):
    from phddpg.agent import AgentConfig, Architecture
    return Architecture.from_network(net1, "i0_0", AgentConfig())


def pytest_terminal_summary(terminalreporter):
    lines = []
    for report in terminalreporter.getreports("passed") + terminalreporter.getreports("failed"):
        for key, value in report.user_properties:
            if key == "acceptance":
                lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
