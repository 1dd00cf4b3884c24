import numpy as np
import pytest
from scipy.special import expit

from shadowfit import Dataset, MechanismModel, OutcomeModel


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_linear_data(rng, N=200, beta=(0.25, -0.5), c=(1.0, 1.0)):
    """Univariate normal covariate, Gaussian outcome, logistic missingness in y."""
    model = OutcomeModel("linear_gaussian", 1)
    x = rng.normal(0.5, 0.5, (N, 1))
    y = model.sample(np.asarray(beta), x, rng)
    r = rng.random(N) < expit(c[0] + c[1] * y)
    return Dataset(r, np.where(r, y, np.nan), None, x), model


@pytest.fixture
def s1_small(rng):
    return make_linear_data(rng)


@pytest.fixture
def working_mech():
    return MechanismModel.logistic(1.0, 1.0)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _ACCEPTANCE[label] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for label in sorted(_ACCEPTANCE, key=lambda s: int(s[1:])):
            terminalreporter.write_line(_ACCEPTANCE[label])
