import pytest

from steprag.corpus import build_index
from steprag.env import generate_world
from steprag.harness import Pipeline


@pytest.fixture(scope="session")
def world_bundle():
    world, passages = generate_world(0, 200, 3)
    return world, passages, build_index(passages)


@pytest.fixture(scope="session")
def world(world_bundle):
    return world_bundle[0]


@pytest.fixture(scope="session")
def index(world_bundle):
    return world_bundle[2]


@pytest.fixture(scope="session")
def pipeline(index):
    return Pipeline(index)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
