import numpy as np
import pytest

from ptycho_nlos.exception import ConfigException
from ptycho_nlos.field import brenner_gradient
from ptycho_nlos.scene import synthesize_coded_surface
from tests.scenes import PITCH


def test_same_seed_same_surface():
    first = synthesize_coded_surface(4, (32, 32), PITCH, 4 * PITCH, (0.5, 1.0), np.pi)
    second = synthesize_coded_surface(4, (32, 32), PITCH, 4 * PITCH, (0.5, 1.0), np.pi)

    np.testing.assert_array_equal(first.profile.data, second.profile.data)


def test_different_seed_different_surface():
    first = synthesize_coded_surface(4, (32, 32), PITCH, 4 * PITCH, (0.5, 1.0), np.pi)
    second = synthesize_coded_surface(5, (32, 32), PITCH, 4 * PITCH, (0.5, 1.0), np.pi)

    assert not np.allclose(first.profile.data, second.profile.data)


def test_modulus_and_phase_ranges():
    surface = synthesize_coded_surface(1, (64, 64), PITCH, 3 * PITCH, (0.3, 0.9), 1.5)
    modulus = np.abs(surface.profile.data)
    phase = np.angle(surface.profile.data)

    assert modulus.min() >= 0.3 and modulus.max() <= 0.9
    assert phase.min() >= -0.75 and phase.max() <= 0.75


def test_modulus_marginal_is_uniform():
    surface = synthesize_coded_surface(2, (64, 64), PITCH, 3 * PITCH, (0.2, 1.0), 0.0)

    assert np.abs(surface.profile.data).mean() == pytest.approx(0.6, abs=1e-9)


def test_degenerate_ranges_give_unit_surface():
    surface = synthesize_coded_surface(3, (16, 16), PITCH, 2 * PITCH, (1.0, 1.0), 0.0)

    np.testing.assert_array_equal(surface.profile.data, np.ones((16, 16)))


def test_longer_correlation_is_smoother():
    short = synthesize_coded_surface(6, (64, 64), PITCH, 2 * PITCH, (0.1, 1.0), 0.0)
    long = synthesize_coded_surface(6, (64, 64), PITCH, 8 * PITCH, (0.1, 1.0), 0.0)

    assert brenner_gradient(np.abs(long.profile.data)) < brenner_gradient(np.abs(short.profile.data))


def test_records_provenance():
    surface = synthesize_coded_surface(9, (16, 16), PITCH, 2 * PITCH, (0.5, 1.0), 1.0)

    assert surface.seed == 9
    assert surface.amp_range == (0.5, 1.0)
    assert surface.correlation_length == 2 * PITCH


@pytest.mark.parametrize("amp_range", [(0.0, 1.0), (0.8, 0.5), (0.5, 1.2)])
def test_invalid_amplitude_range(amp_range):
    with pytest.raises(ConfigException):
        synthesize_coded_surface(0, (16, 16), PITCH, 2 * PITCH, amp_range, 0.0)


def test_correlation_below_pitch_rejected():
    with pytest.raises(ConfigException):
        synthesize_coded_surface(0, (16, 16), PITCH, 0.5 * PITCH, (0.5, 1.0), 0.0)
