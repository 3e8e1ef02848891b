import numpy as np
import pytest

from triobs.model import make_chain3, make_example
from triobs.switching import SwitchingPolicy, plan_switching
from triobs.synthesis import SynthesisConfig, synthesize

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def example():
    return make_example()


@pytest.fixture(scope="session")
def chain3():
    return make_chain3()


@pytest.fixture(scope="session")
def example_cfg():
    return SynthesisConfig(R=3.0, L=2.0, t0=0.0, horizon=40.0, seed=0)


@pytest.fixture(scope="session")
def example_schedule(example, example_cfg):
    sys, beta = example
    return synthesize(sys, beta, example_cfg)


@pytest.fixture(scope="session")
def chain3_schedule(chain3):
    sys, beta = chain3
    return synthesize(sys, beta, SynthesisConfig(R=2.0, horizon=10.0, kernel_samples=5000, seed=3))


@pytest.fixture(scope="session")
def example_plan(example):
    sys, beta = example
    return plan_switching(sys, beta, 0.0, SwitchingPolicy(rho=1.0, horizon=60.0), SynthesisConfig(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
