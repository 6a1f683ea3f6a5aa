import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("pdreg", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pdreg")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.exp(rng.uniform(0.0, np.log(cond), n))
    return (q * w) @ q.T


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


# circle -> flower registration shared by the registration, uncertainty and acceptance tests
FIXTURE_CONFIG = dict(sigma=1.0, noise_amplitude=1.0, time_steps=32, data_weight=100.0)


@pytest.fixture(scope="session")
def circle_flower():
    from pdreg.registration import RegistrationConfig, register
    from pdreg.synthetic import generate_synthetic

    moving = generate_synthetic("circle", 20, 10.0)
    fixed = generate_synthetic("flower", 20, 10.0, 0.3, 5)
    config = RegistrationConfig(**FIXTURE_CONFIG)
    t0 = time.perf_counter()
    result = register(moving, fixed, config)
    result.metadata["elapsed_s"] = time.perf_counter() - t0
    return moving, fixed, config, result


# every registration run anywhere in the suite must have a non-increasing objective trace
CHECKED_TRACES = []


@pytest.fixture(autouse=True, scope="session")
def watch_objective_traces():
    import pdreg.registration as reg

    real = reg._result_from

    def checked(problem, mu, trace, *args, **kwargs):
        ok = bool(np.all(np.diff(trace) <= 0))
        CHECKED_TRACES.append(ok)
        assert ok, f"objective trace increased: {trace}"
        return real(problem, mu, trace, *args, **kwargs)

    reg._result_from = checked
    yield
    reg._result_from = real


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.split("-")[0]), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
