import pytest

# criterion id -> (status, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def record():
    def _record(key: str, passed: bool, detail: str, known_limit: bool = False):
        status = "PASS" if passed else ("FAIL (known limitation)" if known_limit else "FAIL")
        ACCEPTANCE[key] = (status, detail)

    return _record


def _order(key: str):
    num = "".join(ch for ch in key if ch.isdigit())
    return int(num or 0), key


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_order):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{status}] criterion {key}: {detail}")
