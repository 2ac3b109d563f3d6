import numpy as np
import pytest
from hypothesis import settings

from dmimo_adv.scenario import NetworkConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return NetworkConfig(num_rus=4, num_ues=2)


@pytest.fixture
def desk_config():
    return NetworkConfig()


CRITERIA = pytest.StashKey[dict]()
NUM_CRITERIA = 10


@pytest.fixture(scope="session")
def criterion(request):
    """``criterion(n, passed, detail)`` records one acceptance verdict and fails the test if it did not pass."""
    results = request.config.stash.setdefault(CRITERIA, {})

    def record(n, passed, detail):
        results[n] = (bool(passed), detail)
        assert passed, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(CRITERIA, None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, NUM_CRITERIA + 1):
        passed, detail = results.get(n, (None, "not run in this session"))
        verdict = "NOT RUN" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
