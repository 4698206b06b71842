import os

# single-threaded BLAS keeps reductions in a fixed order
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

settings.register_profile("repo", max_examples=25, deadline=None)
settings.load_profile("repo")

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one line per acceptance criterion; echoed in the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
