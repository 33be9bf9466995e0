"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import pytest

from avtts.verification import SUITES

CHECKS = {check.criterion: check for check in SUITES["all"]}
TIME_LIMITS = {1: 300.0, 4: 900.0}


@pytest.mark.slow
@pytest.mark.parametrize("criterion", sorted(CHECKS))
def test_criterion(criterion, capsys):
    result = CHECKS[criterion]()
    with capsys.disabled():
        print("\n" + result.line(), flush=True)
    assert result.passed, result.detail
    limit = TIME_LIMITS.get(criterion)
    if limit is not None:
        assert result.seconds < limit, f"took {result.seconds:.0f}s, limit {limit:.0f}s"


def test_all_criteria_registered():
    assert sorted(CHECKS) == list(range(1, 11))
