import os

# timing criteria are specified single-threaded; must precede the numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from uwmmse.channels import ChannelSpec, generate


def random_channel(rng, M, R, T, scale=1.0):
    return scale * np.abs(rng.standard_normal((M, M, R, T)))


def random_beamformers(rng, M, T, d, p_max=1.0):
    V = rng.standard_normal((M, T, d))
    norms = np.sqrt(np.sum(V**2, axis=(1, 2), keepdims=True))
    return V * np.sqrt(p_max) / norms * rng.uniform(0.2, 1.0, (M, 1, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_rayleigh():
    return generate(ChannelSpec("rayleigh", 4, 2, 2, seed=11), 24)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
