import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# filled in by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    from dlclab.nn import make_rng
    return make_rng(1234)


@pytest.fixture
def acceptance():
    """``record(number, ok, detail)`` stores one PASS/FAIL line for the end-of-run summary."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


@pytest.fixture(scope="session")
def default_pipeline(tmp_path_factory):
    """One full pipeline run with the default config; shared by every test that needs
    trained models. Returns (output dir, wall-clock seconds)."""
    from dlclab.cli import main
    out = tmp_path_factory.mktemp("default_pipeline")
    start = time.perf_counter()
    code = main(["pipeline", "--out", str(out)])
    elapsed = time.perf_counter() - start
    assert code == 0
    return out, elapsed


@pytest.fixture(scope="session")
def default_toy_study(tmp_path_factory):
    """``reproduce-toy`` with the default config. Returns (output dir, exit code, seconds)."""
    from dlclab.cli import main
    out = tmp_path_factory.mktemp("default_toy")
    start = time.perf_counter()
    code = main(["reproduce-toy", "--out", str(out)])
    return out, code, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def as64(module):
    """float64 copy-in-place of a module for finite-difference checks."""
    return module.astype(np.float64)
