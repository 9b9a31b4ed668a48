import numpy as np
import pytest

from impasto_worker.models import ModelSuite
from impasto_worker.service import WorkerServer


@pytest.fixture(scope="session")
def suite():
    # shared across tests: models are read-only after construction
    return ModelSuite(seed=0)


@pytest.fixture(scope="session")
def server(suite):
    srv = WorkerServer("127.0.0.1:0", suite)
    srv.start_background()
    yield srv
    srv.shutdown()


@pytest.fixture
def rng():
    return np.random.default_rng(0xBEEF)
