import os
from pathlib import Path

import pytest

CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    return CRITERIA


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory) -> Path:
    """Where acceptance runs leave figures and JSON (``MAKD_ACCEPTANCE_OUT`` to keep them)."""
    env = os.environ.get("MAKD_ACCEPTANCE_OUT")
    path = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    return path


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
