from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion as PASS or FAIL."""
    results = request.config.stash[_RESULTS]

    @contextmanager
    def record(cid: str, title: str):
        detail: dict = {}
        try:
            yield detail
        except BaseException as exc:
            results[cid] = (False, title, detail, f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        results[cid] = (True, title, detail, "")

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results, key=lambda c: int(c[1:])):
        ok, title, detail, err = results[cid]
        extra = "; ".join(f"{k}={v}" for k, v in detail.items())
        line = f"{cid} {'PASS' if ok else 'FAIL'}  {title}"
        if extra:
            line += f"  [{extra}]"
        if err:
            line += f"  ({err})"
        terminalreporter.write_line(line)
