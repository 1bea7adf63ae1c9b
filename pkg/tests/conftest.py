import numpy as np
import pytest

from bulkpq import Config, ParallelPriorityQueue
from bulkpq.core import KiB, MiB


@pytest.fixture(autouse=True)
def scratch_dir(tmp_path, monkeypatch):
    """Every queue in the suite writes its backing files under tmp_path."""
    monkeypatch.setenv("BULKPQ_TMPDIR", str(tmp_path))
    return tmp_path


@pytest.fixture
def small_config():
    return Config(num_threads=2, mem_budget=2 * MiB, block_size=64 * KiB,
                  insertion_heap_capacity=256, read_buffer_bytes_per_array=64 * KiB,
                  check_invariants=True)


@pytest.fixture
def make_queue(small_config):
    made = []

    def make(**overrides):
        pq = ParallelPriorityQueue(small_config.replace(**overrides))
        made.append(pq)
        return pq

    yield make
    for pq in made:
        pq.close()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA_LINES: list[str] = []


@pytest.fixture
def criterion_log():
    """Record one summary line per acceptance criterion (shown at the end of the run)."""
    def log(line: str) -> None:
        print(line)
        _CRITERIA_LINES.append(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA_LINES:
            terminalreporter.write_line(line)
