import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tempclip.checks import random_bank
from tempclip.model import ModelConfig, init_params

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ModelConfig(embed_dim=8, num_layers=1, num_heads=2, frames_T=3, frame_size=8, patch_size=4)


@pytest.fixture
def tiny():
    return TINY


@pytest.fixture
def tiny_theta():
    return init_params(TINY, 0)


@pytest.fixture
def tiny_bank():
    return random_bank(TINY.embed_dim, n=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """record(index, name, passed, detail): one summary line per acceptance criterion."""

    def record(index, name, passed, detail=""):
        _ACCEPTANCE[index] = f"{index:>2}. {'PASS' if passed else 'FAIL'}  {name:<28} {detail}"
        print(_ACCEPTANCE[index])

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
