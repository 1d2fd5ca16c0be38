import numpy as np
import pytest

from enkf_lab.model import DataRecord, scalar_model, simulate_truth

# criterion lines collected by the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line; returns the verdict for the caller to assert."""

    def record(number, title, passed, detail):
        line = f"criterion {number} [{title}]: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


@pytest.fixture
def affine_model():
    return scalar_model(M=0.9, b=0.0, H=1.0, w=0.0, sigma=0.5, gamma=0.5, m0=0.0, c0=1.0)


@pytest.fixture
def affine_data(affine_model):
    return simulate_truth(affine_model, 10, seed=1)


@pytest.fixture
def one_step_record():
    """Single datum y_1 = 1 (the truth values are irrelevant to the filters)."""
    return DataRecord(truth=np.zeros((2, 1)), observations=np.array([[1.0]]))


@pytest.fixture
def unit_model():
    return scalar_model(M=1.0, H=1.0, sigma=1.0, gamma=1.0, m0=0.0, c0=1.0)
