import numpy as np
import pytest

from ptycho_nlos.exception import ConfigException, DataException
from ptycho_nlos.field import ComplexField, propagate
from ptycho_nlos.scene import (
    AcquisitionMeta,
    NoiseModel,
    ObjectLayer,
    apply_noise,
    embed_object,
    object_to_wall,
    simulate_ptychogram,
    split_tilted_object,
)
from tests.scenes import (
    DEFOCUS,
    NEAR_GEOMETRY,
    PITCH,
    WAVELENGTH,
    flat_surface,
    meta,
    pixel_raster,
    texture,
    texture_layer,
    textured_surface,
)


def test_frame_count_and_shape(single_layer_scene):
    ptychogram, truth = single_layer_scene

    assert ptychogram.frame_count == 9
    assert ptychogram.shape == (64, 64)
    assert truth.alphas == [pytest.approx(1.0)]
    assert len(truth.clean_frames) == 9


def test_pixel_shifts_follow_trajectory(single_layer_scene):
    ptychogram, truth = single_layer_scene

    np.testing.assert_allclose(truth.pixel_shifts[0], ptychogram.trajectory.centered() / PITCH)
    assert np.abs(truth.pixel_shifts[0]).max() == pytest.approx(4.0)


def test_flat_wall_frames_are_shifted_copies(single_layer_scene):
    ptychogram, truth = single_layer_scene
    sensor = propagate(truth.wavefields[0], DEFOCUS).data
    pattern = sensor.real**2 + sensor.imag**2

    for frame, (dx, dy) in zip(ptychogram.frames, truth.pixel_shifts[0]):
        expected = np.roll(pattern, (int(round(dy)), int(round(dx))), axis=(0, 1))
        np.testing.assert_allclose(frame.data, expected, atol=1e-6 * pattern.max())


def test_flat_wall_conserves_energy(single_layer_scene):
    ptychogram, truth = single_layer_scene
    object_energy = float(np.sum(np.abs(truth.objects[0].data) ** 2))

    for frame in ptychogram.frames:
        assert frame.data.sum() == pytest.approx(object_energy, rel=1e-8)


def test_layers_add_incoherently():
    layers = [texture_layer((32, 32), 0.01, seed=1), texture_layer((32, 32), 0.02, seed=2)]
    surface = textured_surface((64, 64))
    trajectory = pixel_raster(3, 3, 4)

    _, both = simulate_ptychogram(layers, surface, trajectory, meta(), NEAR_GEOMETRY)
    _, first = simulate_ptychogram(layers[:1], surface, trajectory, meta(), NEAR_GEOMETRY)
    _, second = simulate_ptychogram(layers[1:], surface, trajectory, meta(), NEAR_GEOMETRY)

    for index in range(9):
        np.testing.assert_allclose(
            both.clean_frames[index],
            first.clean_frames[index] + second.clean_frames[index],
            atol=1e-12,
        )


def test_noisy_simulation_is_deterministic():
    noise = NoiseModel(photon_scale=50.0, read_sigma=0.01)
    layer = texture_layer((32, 32), 0.01, seed=3)

    first, _ = simulate_ptychogram([layer], flat_surface((64, 64)), pixel_raster(3, 3, 2), meta(noise, seed=8), NEAR_GEOMETRY)
    second, _ = simulate_ptychogram([layer], flat_surface((64, 64)), pixel_raster(3, 3, 2), meta(noise, seed=8), NEAR_GEOMETRY)

    np.testing.assert_array_equal(first.stack(), second.stack())


def test_object_outside_guard_window():
    layer = texture_layer((32, 32), 0.01, seed=4, offset=(2 * PITCH, 0.0))

    with pytest.raises(DataException):
        simulate_ptychogram([layer], flat_surface((64, 64)), pixel_raster(3, 3, 2), meta(), NEAR_GEOMETRY)


def test_full_grid_object_is_periodic():
    layer = texture_layer((64, 64), 0.01, seed=5)

    np.testing.assert_array_equal(embed_object(layer, (64, 64), PITCH), layer.reflectance.data)


def test_object_to_wall_propagates_the_centred_object():
    layer = texture_layer((32, 32), 0.02, seed=6)

    wall = object_to_wall(layer, meta(), (64, 64))

    canvas = np.zeros((64, 64), dtype=np.complex128)
    canvas[16:48, 16:48] = layer.reflectance.data
    expected = propagate(ComplexField(data=canvas, pitch=PITCH, wavelength=WAVELENGTH), 0.02)
    np.testing.assert_allclose(wall.data, expected.data, atol=1e-12)
    assert wall.energy <= layer.reflectance.energy * (1 + 1e-9)


def test_point_like_object_spreads_as_a_gaussian_beam():
    sigma = 4.0
    coords = np.arange(64) - 32
    y, x = np.meshgrid(coords, coords, indexing="ij")
    spot = np.exp(-(x**2 + y**2) / (2 * sigma**2))
    layer = ObjectLayer(reflectance=ComplexField(data=spot, pitch=PITCH, wavelength=WAVELENGTH), depth=0.4)

    wall = np.abs(object_to_wall(layer, meta(), (256, 256)).data)

    waist = np.sqrt(2.0) * sigma * PITCH
    width = waist * np.hypot(1.0, 0.4 / (np.pi * waist**2 / WAVELENGTH))
    embedded = np.abs(embed_object(layer, (256, 256), PITCH))
    rows, cols = np.indices(embedded.shape)
    centre_y, centre_x = (np.sum(axis * embedded) / embedded.sum() for axis in (rows, cols))
    radius2 = ((rows - centre_y) ** 2 + (cols - centre_x) ** 2) * PITCH**2
    envelope = waist / width * np.exp(-radius2 / width**2)
    rms = np.sqrt(np.mean((wall - envelope) ** 2))
    assert rms <= 0.02 * np.sqrt(np.mean(envelope**2))


def test_pitch_mismatch():
    coarse = AcquisitionMeta(defocus_d=DEFOCUS, wavelength=WAVELENGTH, pitch=2 * PITCH)

    with pytest.raises(DataException, match="pitch"):
        simulate_ptychogram(
            [texture_layer((32, 32), 0.01, seed=6)], flat_surface((64, 64)), pixel_raster(3, 3, 2), coarse, NEAR_GEOMETRY
        )


def test_shift_beyond_half_grid():
    with pytest.raises(ConfigException, match="Layer 0"):
        simulate_ptychogram(
            [texture_layer((32, 32), 0.01, seed=7)], flat_surface((64, 64)), pixel_raster(3, 3, 40), meta(), NEAR_GEOMETRY
        )


def test_no_layers():
    with pytest.raises(ConfigException):
        simulate_ptychogram([], flat_surface((64, 64)), pixel_raster(3, 3, 2), meta(), NEAR_GEOMETRY)


def test_split_tilted_object():
    reflectance = ComplexField(data=texture((32, 32), seed=8), pitch=PITCH, wavelength=WAVELENGTH)

    strips = split_tilted_object(reflectance, 0.01, 0.016, 4)

    assert [layer.depth for layer in strips] == pytest.approx([0.01, 0.012, 0.014, 0.016])
    np.testing.assert_allclose(sum(layer.reflectance.data for layer in strips), reflectance.data)
    assert not strips[0].reflectance.data[:, 8:].any()


def test_noise_statistics():
    clean = [np.ones((64, 64)) for _ in range(4)]

    noisy = np.stack(apply_noise(clean, NoiseModel(photon_scale=100.0, read_sigma=0.05), seed=1))

    assert noisy.mean() == pytest.approx(1.0, abs=0.01)
    assert noisy.var() == pytest.approx(1 / 100 + 0.05**2, rel=0.1)


def test_noise_is_seeded_per_frame():
    noise = NoiseModel(photon_scale=20.0)
    frame = texture((16, 16), seed=2) + 0.1

    alone = apply_noise([np.ones((16, 16)), frame], noise, seed=3)
    other = apply_noise([np.full((16, 16), 5.0), frame], noise, seed=3)

    np.testing.assert_array_equal(alone[1], other[1])


def test_noise_never_negative():
    clean = [np.full((32, 32), 0.01)]

    noisy = apply_noise(clean, NoiseModel(read_sigma=0.5), seed=4)

    assert noisy[0].min() >= 0.0


def test_single_bit_quantization():
    clean = [2.0 * texture((16, 16), seed=5)]

    quantized = apply_noise(clean, NoiseModel(bit_depth=1), seed=0)

    assert set(np.unique(quantized[0])) <= {0.0, 2.0}


def test_disabled_noise_returns_clean_frames():
    clean = [texture((8, 8), seed=6)]

    assert apply_noise(clean, NoiseModel(), seed=0) is clean
