import numpy as np
import pytest
from hypothesis import settings

from cmdis import GaussianMixture, NoiseSchedule

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def toy():
    return GaussianMixture.toy()


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gauss_logpdf(x, mean, var):
    """Isotropic Gaussian log-density written out longhand (test oracle)."""
    x, mean = np.asarray(x, float), np.asarray(mean, float)
    d = x.shape[-1]
    return -0.5 * ((x - mean) ** 2).sum(-1) / var - 0.5 * d * np.log(2 * np.pi * var)


ACCEPTANCE = pytest.StashKey[dict]()
CRITERIA = 11


@pytest.fixture
def gate(pytestconfig):
    """Record one PASS/FAIL line per acceptance criterion."""
    log = pytestconfig.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str):
        log[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE, None)
    if not log:
        return
    terminalreporter.section("acceptance gate")
    for n in range(1, CRITERIA + 1):
        terminalreporter.write_line(log.get(n, f"criterion {n:2d}: FAIL  not reached"))
