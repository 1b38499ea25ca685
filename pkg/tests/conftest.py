import numpy as np
import pytest

from avica.model import ModelParams, MultiViewDataset


def random_instance(rng, m, k, n, mu_sq=0.0):
    """Random well-conditioned parameters and data for oracle checks."""
    W = rng.standard_normal((m, k, k)) + 2.0 * np.eye(k)
    lam = rng.uniform(0.2, 1.0, (m, k))
    lam /= lam.sum(axis=0)
    if mu_sq > 0:
        lam = mu_sq + (1 - m * mu_sq) * lam
    sigma = rng.uniform(0.5, 1.5, k)
    X = rng.standard_normal((m, k, n))
    return ModelParams(W, lam, sigma, mu_sq), MultiViewDataset(X)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_LINES = {}


def record_acceptance(number, title, ok, detail=""):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
