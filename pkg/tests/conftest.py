import time

import pytest

from stad.pipeline import RunConfig, run_desk_scale

# criterion number -> (passed, detail); filled by the acceptance tests
VERDICTS: dict[int, tuple[bool, str]] = {}

DESK_CONFIG = RunConfig(seed=0, teacher_epochs=50, student_epochs=100)


def record(criterion: int, passed: bool, detail: str) -> None:
    """Keep the verdict for the end-of-run table and echo it immediately."""
    VERDICTS[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def _timed_run(workdir):
    t0 = time.perf_counter()
    result = run_desk_scale(workdir, DESK_CONFIG)
    return {"dir": workdir, "result": result, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full desk-scale run: synthesize, train, distill, detect every mode, evaluate."""
    return _timed_run(tmp_path_factory.mktemp("desk-a"))


@pytest.fixture(scope="session")
def desk_rerun(tmp_path_factory, desk_run):
    """An independent second run with the same configuration and seed."""
    return _timed_run(tmp_path_factory.mktemp("desk-b"))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
