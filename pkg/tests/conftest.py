from __future__ import annotations

import pytest

ACCEPTANCE = pytest.StashKey[dict]()
CRITERIA = {
    1: "gradient correctness",
    2: "distribution algebra",
    3: "eval-metric oracle",
    4: "linearity recovery",
    5: "end-to-end embedding",
    6: "RL comparison pipeline",
    7: "determinism",
    8: "dynamics quality gate",
}


@pytest.fixture
def acceptance(request):
    """Record one criterion's verdict; the line is echoed now and again in the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {CRITERIA[number]}: {detail}"
        results[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        terminalreporter.write_line(results.get(n, f"criterion {n} NOT RUN: {CRITERIA[n]}"))
