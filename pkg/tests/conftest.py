import time

import pytest

from gradcheck_util import run_gradcheck

VERDICTS: list[str] = []


def record(label: str, ok: bool, detail: str = "") -> bool:
    """Remember one PASS/FAIL line for the terminal summary and echo it."""
    line = f"{'PASS' if ok else 'FAIL'} {label}" + (f"  ({detail})" if detail else "")
    VERDICTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="session")
def gradcheck_results():
    return run_gradcheck()


@pytest.fixture(scope="session")
def desk_runs():
    """Three seeds of the full desk benchmark with the packaged desk config."""
    from cpca.config import desk_config
    from cpca.pipeline import run_pipeline

    t0 = time.perf_counter()
    runs = [run_pipeline(desk_config(), seed=s) for s in range(3)]
    return runs, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
