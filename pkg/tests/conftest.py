import contextlib

import pytest

# criterion id -> (status, title, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@contextlib.contextmanager
def record_criterion(cid, title):
    """Record PASS/FAIL for one acceptance criterion and echo it immediately."""
    detail = []
    try:
        yield detail
    except pytest.skip.Exception as e:
        ACCEPTANCE[cid] = ("NOT RUN", title, str(e))
        raise
    except BaseException as e:
        ACCEPTANCE[cid] = ("FAIL", title, "; ".join(detail + [f"{type(e).__name__}: {e}"]))
        raise
    else:
        ACCEPTANCE[cid] = ("PASS", title, "; ".join(detail))
    finally:
        status, _, text = ACCEPTANCE[cid]
        print(f"\n[{status}] criterion {cid}: {title} ({text})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{status}] {cid}: {title} -- {detail}")
