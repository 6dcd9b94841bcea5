import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        status, title, dt = results[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title} ({dt:.1f}s)")
