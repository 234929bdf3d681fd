import pytest

_ACCEPTANCE: list[tuple[str, bool, str]] = []


class AcceptanceLog:
    """Collects one pass/fail line per acceptance criterion."""

    def record(self, cid: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((cid, bool(passed), detail))
        return bool(passed)


@pytest.fixture
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, passed, detail in sorted(_ACCEPTANCE, key=lambda r: _sort_key(r[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {cid:<5} {detail}")


def _sort_key(cid):
    num = "".join(ch for ch in cid if ch.isdigit())
    return (int(num or 0), cid)
