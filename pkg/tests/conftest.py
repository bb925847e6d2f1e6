import pytest

_CRITERIA: dict[str, str] = {}


@pytest.fixture
def criterion():
    """Record and print one pass/fail line for an acceptance criterion; returns the verdict."""
    def report(tag: str, ok: bool, detail: str) -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _CRITERIA[tag] = line
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for tag in sorted(_CRITERIA, key=lambda t: int(t[1:])):
            terminalreporter.write_line(_CRITERIA[tag])
