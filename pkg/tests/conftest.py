import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def report(request):
    """Record one pass/fail line per acceptance criterion and echo it."""
    lines = request.config.stash[_LINES]

    def _report(label: str, ok, detail: str):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{status}  {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: _order(s)):
            terminalreporter.write_line(line)


def _order(line: str):
    label = line.split("  ", 1)[1]
    num = label.split(" ", 1)[0].rstrip(".:")
    digits = "".join(ch for ch in num if ch.isdigit())
    return (int(digits) if digits else 99, num)
