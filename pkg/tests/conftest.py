import pytest

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_addoption(parser):
    parser.addoption("--live", action="store_true", default=False,
                     help="run tests that call a real model endpoint (needs METAOPT_API_KEY)")


@pytest.fixture
def live(request):
    return request.config.getoption("--live")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {title} | {detail}")
