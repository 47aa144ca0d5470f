import pytest

# (number, name, passed, detail) lines collected by the acceptance suite
ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the caller still asserts."""

    def record(number, name, passed, detail=""):
        line = (number, name, bool(passed), detail)
        ACCEPTANCE.append(line)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {name} {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
