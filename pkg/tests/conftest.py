import numpy as np
import pytest
import torch

from hsimamba.data import generate_synthetic_cube, stratified_split

ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} -- {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _float64_and_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def smoke_data():
    """16x16, 5 classes from abundance argmax, 30% train labels."""
    cube, gt = generate_synthetic_cube(5, 32, 16, 16, snr_db=30, seed=0)
    labels = stratified_split(gt.labels(), 0.3, 0.5, seed=0)
    return cube, gt, labels
