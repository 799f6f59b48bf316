import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_acceptance = pytest.StashKey[list]()
_notes = pytest.StashKey[list]()


@pytest.fixture
def note(request):
    """Report an informational line (not a verdict) in the run summary."""
    notes = request.config.stash.setdefault(_notes, [])
    return notes.append


@pytest.fixture
def acceptance(request):
    """Record one acceptance verdict: ``acceptance(name, passed, detail)``."""
    results = request.config.stash.setdefault(_acceptance, [])

    def record(name, passed, detail=""):
        verdict = "PASS" if passed is True else ("SKIP" if passed is None else "FAIL")
        line = f"{verdict}  {name}" + (f"  ({detail})" if detail else "")
        results.append(line)
        print(f"\nACCEPTANCE {line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    notes = config.stash.get(_notes, [])
    if notes:
        terminalreporter.section("reported comparisons")
        for line in notes:
            terminalreporter.write_line(line)
    results = config.stash.get(_acceptance, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
