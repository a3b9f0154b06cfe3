import numpy as np
import pytest

from emcad import decoder as D


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config():
    return D.DecoderConfig(channels=(8, 16, 24, 32))


@pytest.fixture(scope="session")
def standard_decoder():
    return D.build_decoder(D.standard_config(), seed=0)


def randn(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
