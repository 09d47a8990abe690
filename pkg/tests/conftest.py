import sys

import numpy as np
import pytest

from ssmkit.models import LinearGaussianDynamics, LinearGaussianObservation, StateSpaceModel


def scalar_lg(a=0.9, q=1.0, r=0.5, m0=0.0, s0=1.0, b=0.0):
    return StateSpaceModel(
        LinearGaussianDynamics(A=[[a]], Q=[[q]], mu0=[m0], Sigma0=[[s0]], b=[b]),
        LinearGaussianObservation(H=[[1.0]], R=[[r]]),
    )


def random_lg(rng, dx=2, dy=2, radius=0.8):
    A = rng.standard_normal((dx, dx))
    A *= radius / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((dx, dx))
    C = rng.standard_normal((dy, dy))
    return StateSpaceModel(
        LinearGaussianDynamics(A=A, Q=B @ B.T / dx + 0.1 * np.eye(dx), mu0=rng.standard_normal(dx),
                               Sigma0=np.eye(dx), b=rng.standard_normal(dx) * 0.1),
        LinearGaussianObservation(H=rng.standard_normal((dy, dx)), R=C @ C.T / dy + 0.2 * np.eye(dy)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
