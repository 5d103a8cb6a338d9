import pytest

from ptycho_nlos.scene import simulate_ptychogram
from ptycho_nlos.settings import THREADS_ENV_VAR
from tests.scenes import NEAR_GEOMETRY, flat_surface, meta, pixel_raster, texture_layer, textured_surface


@pytest.fixture(autouse=True)
def worker_threads(monkeypatch):
    monkeypatch.setenv(THREADS_ENV_VAR, "2")


@pytest.fixture(scope="function")
def single_layer_scene():
    """One textured layer at 1 cm (alpha 1) behind a flat wall, 3 x 3 scan in 4 px steps."""
    layer = texture_layer((32, 32), 0.01, seed=5)
    return simulate_ptychogram([layer], flat_surface((64, 64)), pixel_raster(3, 3, 4), meta(), NEAR_GEOMETRY)


@pytest.fixture(scope="function")
def textured_scene():
    """One layer behind a random wall, 4 x 4 scan in 3 px steps."""
    layer = texture_layer((32, 32), 0.01, seed=7)
    return simulate_ptychogram([layer], textured_surface((64, 64)), pixel_raster(4, 4, 3), meta(), NEAR_GEOMETRY)


@pytest.fixture(scope="function")
def two_layer_scene():
    """Layers at 1 cm and 2 cm (alpha 1 and 0.5) behind a random wall, 5 x 5 scan in 4 px steps."""
    layers = [texture_layer((32, 32), 0.01, seed=11), texture_layer((32, 32), 0.02, seed=12)]
    return simulate_ptychogram(layers, textured_surface((64, 64)), pixel_raster(5, 5, 4), meta(), NEAR_GEOMETRY)
