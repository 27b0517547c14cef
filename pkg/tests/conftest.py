import numpy as np
import pytest

from cldrf.simulation import SCENARIOS, ScenarioConfig, generate, scenario_clusters


def scenario_n(name, n=800):
    """Largest size not above n divisible by the scenario's cluster count."""
    C = scenario_clusters(name)
    return n - n % C


@pytest.fixture(scope="session")
def scenario_data():
    """One dataset per scenario, seed 11."""
    return {s: generate(ScenarioConfig(s, scenario_n(s), 11)) for s in SCENARIOS}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Store a one-line verdict, echoed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
