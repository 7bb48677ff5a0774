import uuid

import pytest

from tests.acceptance_log import lines as acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # one line per acceptance criterion, echoed regardless of capture mode
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


class SeqIds:
    """Deterministic ascending id source for store-level tests."""

    def __init__(self, start: int = 1) -> None:
        self._next = start

    def next_id(self) -> int:
        value = self._next
        self._next += 1
        return value


class SeqUuids:
    """Deterministic UUID source: counter rendered as RFC 4122 v4."""

    def __init__(self) -> None:
        self._next = 0

    def next_uuid(self) -> str:
        self._next += 1
        return str(uuid.UUID(int=self._next, version=4))


@pytest.fixture
def ids():
    return SeqIds()


@pytest.fixture
def uuids():
    return SeqUuids()
