import pytest

from budgetalloc.envmodel import Environment, MroiCurve


def linear(a, slope):
    return MroiCurve.polynomial([a, -slope])


@pytest.fixture
def two_period_env():
    # F1 = 2 - 0.5 b, F2 = 1 - 0.25 b
    return Environment((linear(2.0, 0.5), linear(1.0, 0.25)), 6.0)


@pytest.fixture
def identical_env():
    return Environment(tuple(linear(1.0, 1 / 6) for _ in range(3)), 6.0)


@pytest.fixture
def identical_env6():
    return Environment(tuple(linear(1.5, 0.2) for _ in range(6)), 6.0)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
