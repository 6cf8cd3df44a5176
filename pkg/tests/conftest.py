import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_partition(rng: np.random.Generator, n: int, max_blocks: int = 6):
    from blockattn.masks import BlockPartition

    k = int(rng.integers(1, min(n, max_blocks) + 1))
    cuts = sorted(rng.choice(np.arange(1, n), size=k - 1, replace=False)) if k > 1 else []
    return BlockPartition.from_boundaries(n, cuts)


# lines recorded by test_acceptance.py, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
