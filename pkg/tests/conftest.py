from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

from zenopair.dynamics import RampProtocol
from zenopair.hamiltonian import PairParams, hz

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def nominal() -> PairParams:
    """Tabulated collisional parameters with the nominal 150 Hz drive."""
    return PairParams.nominal()


@pytest.fixture(scope="session")
def descending_ramp() -> RampProtocol:
    return RampProtocol.two_leg(hz(1500.0), hz(-1500.0), hz(11.1e3), hz(150.0))


ACCEPTANCE_LOG: list[str] = []


@pytest.fixture
def acceptance_log() -> list[str]:
    return ACCEPTANCE_LOG


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LOG, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
