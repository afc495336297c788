import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dramnet.sim import ALL_CONDITIONS, generate_dataset  # noqa: E402


@pytest.fixture(scope="session")
def default_dataset():
    """The 3 devices x 6 conditions x 10 captures set at full 1024 x 1024 geometry."""
    return generate_dataset(3, ALL_CONDITIONS, 10, 1024, 1024, master_seed=7)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(3, ALL_CONDITIONS, 2, 64, 64, master_seed=11)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion; printed at the end of the run."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
