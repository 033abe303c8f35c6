import numpy as np
import pytest

from nnes.model import build_scenario, default_config, default_scenario, minimal_config

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small():
    """Two L=2 XY reservoirs, static XX coupling; 32-dim."""
    return default_scenario(length=2).with_numerics(horizon=6.0)


@pytest.fixture(scope="session")
def driven():
    """Like ``small`` but the coupling to reservoir 2 is modulated in time."""
    cfg = default_config(length=2)
    cfg["coupling"]["terms"][1]["envelope"] = {"kind": "sinusoid", "amplitude": 1.0,
                                               "frequency": 1.3, "phase": 0.4}
    cfg["numerics"]["horizon"] = 4.0
    return build_scenario(cfg)


@pytest.fixture(scope="session")
def uncoupled():
    cfg = default_config(length=2)
    cfg["coupling"]["terms"] = []
    cfg["numerics"]["horizon"] = 4.0
    return build_scenario(cfg)


@pytest.fixture(scope="session")
def minimal():
    return build_scenario(minimal_config())


def random_matrix(rng, d, hermitian=False):
    m = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return (m + m.conj().T) / 2 if hermitian else m
