import numpy as np
import pytest

from opflab.dataset import fixture_path, load_case
from opflab.grid import Branch, Bus, Generator, GridCase, Load
from opflab.powerflow import build_dataset


def two_bus(r=0.01, x=0.1, b=0.0, tap=1.0, shift=0.0, s_max=0.0, shunts=(), pd=0.5, qd=0.1):
    return GridCase(
        "two_bus",
        100.0,
        (Bus(0, 0.9, 1.1, True), Bus(1, 0.9, 1.1)),
        (Generator(0, 0, 0.0, 2.0, -1.0, 1.0, 1.0),),
        (Load(0, 1, pd, qd),),
        tuple(shunts),
        (Branch(0, 0, 1, r, x, b, tap, shift, s_max, tap != 1.0 or shift != 0.0),),
    )


def random_point(case, rng, batch=None):
    shape_b = (case.n_bus,) if batch is None else (batch, case.n_bus)
    shape_g = (case.n_gen,) if batch is None else (batch, case.n_gen)
    return (
        rng.uniform(0.9, 1.1, shape_b),
        rng.uniform(-0.3, 0.3, shape_b),
        rng.uniform(0.0, 1.5, shape_g),
        rng.uniform(-0.5, 0.5, shape_g),
    )


@pytest.fixture(scope="session")
def case2():
    return load_case(fixture_path("case2.json"))


@pytest.fixture(scope="session")
def case3():
    return load_case(fixture_path("case3.json"))


@pytest.fixture(scope="session")
def case5():
    return load_case(fixture_path("case5.json"))


@pytest.fixture(scope="session")
def case9():
    return load_case(fixture_path("case9.m"))


@pytest.fixture(scope="session")
def ds3(case3):
    return build_dataset(case3, 60, seed=0)


@pytest.fixture(scope="session")
def ds5(case5):
    return build_dataset(case5, 60, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion number, verdict line) collected by the acceptance suite
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
