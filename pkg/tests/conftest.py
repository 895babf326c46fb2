import time
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("siamix", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("siamix")

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Context manager recording a PASS/FAIL verdict for one acceptance criterion.

    Any exception inside the block (a failed assert included) marks the
    criterion FAIL and propagates so pytest reports it as usual.
    """
    verdicts = request.config.stash.setdefault(_VERDICTS, {})

    @contextmanager
    def run(number: int, title: str):
        note = SimpleNamespace(detail="")
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield note
            status = "PASS"
        finally:
            line = f"criterion {number:>2} {status}: {title} ({time.perf_counter() - start:.1f}s) {note.detail}".rstrip()
            verdicts[number] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
