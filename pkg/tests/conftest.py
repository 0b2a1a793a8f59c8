from __future__ import annotations

from pathlib import Path

import pytest

from dynmatch.core import Environment, load_environment

FIXTURE_DIR = Path(__file__).resolve().parents[1] / "src" / "dynmatch" / "fixtures"

CRITERIA: list[str] = []


@pytest.fixture
def e1() -> Environment:
    return load_environment(FIXTURE_DIR / "E1.json")


@pytest.fixture
def e2() -> Environment:
    return load_environment(FIXTURE_DIR / "E2.json")


@pytest.fixture
def e3() -> Environment:
    return load_environment(FIXTURE_DIR / "E3.json")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
