import contextlib
import time

import pytest

_RESULTS: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.passed = False
        self.detail = ""
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        c = Criterion(number, title)
        try:
            yield c
        except Exception as exc:
            c.passed = False
            c.detail = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            status = "PASS" if c.passed else "FAIL"
            line = f"criterion {number:>2} {status}  {title}: {c.detail} ({c.elapsed:.1f}s)"
            _RESULTS[number] = line
            print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[n])
