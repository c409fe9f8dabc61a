import numpy as np
import pytest

from spectm.core import BandTable, default_band_table, default_tokenization
from spectm.synthgen import SceneConfig, simulate_scene


@pytest.fixture(scope="session")
def table():
    return default_band_table()


@pytest.fixture(scope="session")
def tokenization(table):
    return default_tokenization(table)


@pytest.fixture(scope="session")
def tiny_scene(table):
    # 3 locations x 10 timesteps, enough group structure for split tests
    return simulate_scene(SceneConfig(n_locations=3, n_timesteps=10,
                                      rng_seed=7, noise_sd=5e-4), table)


@pytest.fixture(scope="session")
def noisefree_scene(table):
    return simulate_scene(SceneConfig(n_locations=2, n_timesteps=8,
                                      rng_seed=5, noise_sd=0.0), table)


def make_table(wavelengths) -> BandTable:
    return BandTable(wavelengths=np.asarray(wavelengths, dtype=np.float64))


@pytest.fixture()
def toy_table():
    # 12 evenly spaced bands, 10 nm apart
    return make_table(np.arange(400.0, 520.0, 10.0))
