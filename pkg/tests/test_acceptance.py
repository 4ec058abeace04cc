"""Acceptance criteria at their pinned tolerances, one printed pass/fail line each.

Run as ``pytest -v tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import sys

import pytest

from crit_avalanche import acceptance

CHECKS = [pytest.param(check, id=check.__name__.removeprefix("check_")) for check in acceptance.ACCEPTANCE]


@pytest.mark.parametrize("check", CHECKS)
def test_criterion(check, capsys):
    result = check()
    with capsys.disabled():
        sys.stdout.write("\n" + result.line() + "\n")
    assert result.passed, result.line()
    if result.budget is not None:
        assert result.seconds <= result.budget, result.line()


if __name__ == "__main__":
    from crit_avalanche.cli import selftest

    sys.exit(selftest("full"))
