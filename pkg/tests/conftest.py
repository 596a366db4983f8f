import pytest

VERDICTS = {}


@pytest.fixture(scope="session")
def verdicts():
    return VERDICTS


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
    passed = sum(line.split()[2] == "PASS" for line in VERDICTS.values())
    terminalreporter.write_line(f"{passed}/{len(VERDICTS)} criteria pass")
