import pytest

from latentfuzz.bench import BenchmarkSettings, blob_benchmark

SMALL = BenchmarkSettings(shape=(1, 8, 8), per_class=40, jitter=0.8, hidden=(16, 8), epochs=15,
                          latent_dim=4, corpus_per_class=2)


@pytest.fixture(scope="session")
def small_bench():
    """Fast 8x8 variant of the blob benchmark for unit tests."""
    return blob_benchmark(SMALL)


@pytest.fixture(scope="session")
def bench():
    """The default desk benchmark used by the acceptance criteria."""
    return blob_benchmark()


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record and print one pass/fail line for a numbered acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
