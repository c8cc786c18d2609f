import numpy as np
import pytest

from eqlearn.problems import generate
from eqlearn.trainer import StageSchedule

TINY_SCHEDULE = StageSchedule(n_init=20, n_explore=4, n_focus=16, epochs=2, n_final=12)
SHORT_SCHEDULE = StageSchedule(n_init=100, n_explore=10, n_focus=90, epochs=3, n_final=80)


@pytest.fixture(scope="session")
def resistors_bundle():
    return generate("resistors", seed=1, size=500)


@pytest.fixture(scope="session")
def magic_bundle():
    return generate("magic", seed=1)


@pytest.fixture(scope="session")
def magman_bundle():
    return generate("magman", seed=1)


@pytest.fixture(scope="session")
def turtlebot_bundle():
    return generate("turtlebot", seed=1)


@pytest.fixture(scope="session")
def all_bundles(resistors_bundle, magic_bundle, magman_bundle, turtlebot_bundle):
    return {"resistors": resistors_bundle, "magic": magic_bundle,
            "magman": magman_bundle, "turtlebot": turtlebot_bundle}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
