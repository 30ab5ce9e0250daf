"""Acceptance criteria 1-10: one PASS/FAIL line each, at the stated limits.

Lines are printed as the tests run and repeated in the terminal summary.
"""

import pytest

from gssirepl.harness.checks import CRITERIA, timed

from conftest import ACCEPTANCE_LINES


@pytest.mark.parametrize("name,limit,fn", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 11)])
def test_criterion(name, limit, fn):
    result = timed(name, limit, fn)
    ACCEPTANCE_LINES.append(result.line())
    print(result.line())
    assert result.ok, result.detail
    assert result.in_time, f"took {result.seconds:.1f}s, limit {limit}s"
