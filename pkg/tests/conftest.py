import pytest


@pytest.fixture
def announce(request):
    """Write a line on the live terminal, past output capture."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def _announce(line: str) -> None:
        if reporter is not None:
            reporter.ensure_newline()
            reporter.write_line(line)
        else:
            print(line)

    return _announce
