from support import ACCEPTANCE, ACCEPTANCE_TITLES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        parts = ACCEPTANCE.get(n)
        if not parts:
            tr.write_line(f"ACCEPTANCE {n} NOT RUN  {title}")
            continue
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        tr.write_line(f"ACCEPTANCE {n} {verdict}  {title}")
        for ok, detail in parts:
            tr.write_line(f"    [{'ok' if ok else 'FAIL'}] {detail}")
