import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; it is echoed live and in the terminal summary."""
    def _report(number, title, ok, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'} {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture(scope="session")
def vector_data():
    from snapuq.streamlab import make_datasets
    return make_datasets(5, kind="vector", n_train=800, n_dev=800, n_test=800, n_ood=150)


@pytest.fixture(scope="session")
def small_trained(vector_data):
    """A quickly trained and calibrated vector model shared by several tests."""
    from snapuq.pipeline import calibrate_model, default_train_config, train_model
    from snapuq.streamlab import StreamSpec
    cfg = default_train_config("vector", 5, epochs=6)
    model, _ = train_model(vector_data, 5, cfg)
    calibrate_model(model, vector_data, 5, stream_spec=StreamSpec(seed=5))
    return model
