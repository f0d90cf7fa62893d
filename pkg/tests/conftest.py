import numpy as np
import pytest
import torch

from sfae.data import PhantomConfig, make_phantom_dataset

# small phantoms keep end-to-end tests fast; geometry still divisible by 16
SMALL_PHANTOM = PhantomConfig(shape=(20, 72, 72), semi_axes=(14.0, 30.0, 25.0), rim_width=3.0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_split():
    return make_phantom_dataset(4, 0, SMALL_PHANTOM, n_center_slices=12, out_size=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
