import os
import shutil
from pathlib import Path

import pytest

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
STREAMS = FIXTURES / "streams"
CLASSES = FIXTURES / "classes"
JAVA_BIN = FIXTURES / "java" / "bin"

JAVA = os.environ.get("DESERFILTER_JAVA") or (
    "/opt/jtools/jre/bin/java" if Path("/opt/jtools/jre/bin/java").exists() else shutil.which("java"))

# acceptance criterion -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def stream_fixtures():
    return sorted(p.stem for p in STREAMS.glob("*.bin"))


@pytest.fixture(scope="session")
def java():
    if not JAVA:
        pytest.skip("no java runtime available")
    return JAVA


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
