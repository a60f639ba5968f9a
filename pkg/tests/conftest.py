import numpy as np
import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(capsys):
    """Record and print a one-line PASS/FAIL verdict for an acceptance criterion."""

    def report(name: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _VERDICTS.append((name, bool(ok), detail))
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
