import numpy as np
import pytest

_CRITERIA: list = []
_TABLES: list = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line for the acceptance summary."""

    def record(number: str, name: str, ok: bool, detail: str = ""):
        _CRITERIA.append((number, name, bool(ok), detail))
        return ok

    return record


@pytest.fixture(scope="session")
def emit_table():
    return _TABLES.append


@pytest.fixture(scope="session")
def bench(emit_table):
    """The full desk benchmark, run once per session."""
    from latentdistill import benchmark

    res = benchmark.run_benchmark(benchmark.BenchConfig())
    emit_table(f"Desk benchmark ({res.seconds / 60:.1f} min; accuracies in %):\n" + res.to_markdown())
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end benchmark (about 45 minutes)")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, name, ok, detail in sorted(_CRITERIA, key=lambda c: (int(c[0].rstrip("ab")), c[0])):
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>3} {name}" + (f" -- {detail}" if detail else ""))
    for table in _TABLES:
        tr.write_line("")
        for line in table.splitlines():
            tr.write_line(line)
