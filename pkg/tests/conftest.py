import pytest

# criterion number -> list of (ok, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        results = ACCEPTANCE[n]
        ok = all(r[0] for r in results)
        details = "; ".join(d for _, d in results)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {details}")
