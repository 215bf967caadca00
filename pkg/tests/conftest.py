import pytest
import torch

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record(num: int, ok: bool, text: str) -> None:
    ACCEPTANCE_LINES[num] = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {text}"


@pytest.fixture
def acceptance():
    return record


def pytest_configure(config):
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
