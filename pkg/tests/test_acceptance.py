"""Acceptance criteria at their documented sample sizes and tolerances.

Each test runs one criterion with the ``full`` profile and the suite's
default seed, prints its PASS/FAIL line and asserts the pass flag.
Criteria 10 and 11 share one batch of spines.
"""

import pytest

from critcascade.acceptance import CRITERIA

SEED = 20240611


@pytest.mark.acceptance
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, capsys):
    import time

    t0 = time.perf_counter()
    result = CRITERIA[number](SEED, "full")
    result.seconds = time.perf_counter() - t0
    with capsys.disabled():
        print("\n" + result.line())
    failed = {k: v for k, v in result.metrics.items() if isinstance(v, dict) and v.get("ok") is False}
    assert result.passed, failed or result.metrics
