import numpy as np
import pytest

from replica_sync.diffusion import AnalyticPairBackend, MixtureScore, make_vp_schedule
from replica_sync.dit import DiT, DitConfig, DitPairBackend, calibrate_decoder
from replica_sync.protocols import default_mixture


@pytest.fixture(scope="session")
def sched():
    return make_vp_schedule(100)


@pytest.fixture(scope="session")
def mixture():
    return default_mixture()


@pytest.fixture(scope="session")
def model():
    return DiT(DitConfig())


@pytest.fixture(scope="session")
def calibrated(sched, mixture):
    return calibrate_decoder(DitConfig(), sched, mixture)


@pytest.fixture(scope="session")
def analytic_backend(sched, mixture):
    return AnalyticPairBackend(MixtureScore(sched, mixture), (1, 8, 8))


@pytest.fixture(scope="session")
def dit_backend(calibrated, sched):
    return DitPairBackend(calibrated.model, sched)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
