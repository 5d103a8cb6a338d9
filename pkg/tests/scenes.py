import numpy as np
from scipy import ndimage

from ptycho_nlos.field import ComplexField, IntensityFrame, shift_array
from ptycho_nlos.registration import LayerHypothesis
from ptycho_nlos.scene import (
    AcquisitionMeta,
    ObjectLayer,
    Ptychogram,
    ScanTrajectory,
    ShiftGeometry,
    synthesize_coded_surface,
)

PITCH = 16e-6
WAVELENGTH = 532e-9
DEFOCUS = 0.75e-3

# short-range geometry: alpha = 1 at 1 cm, where small grids keep their full band
NEAR_GEOMETRY = ShiftGeometry(kappa=1.0, z_ref=0.01)


def texture(shape, seed, sigma=1.5):
    """Smooth random pattern scaled to [0, 1]."""
    smooth = ndimage.gaussian_filter(np.random.default_rng(seed).random(shape), sigma, mode="wrap")
    smooth -= smooth.min()
    return smooth / smooth.max()


def random_field(shape, seed, pitch=PITCH):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return ComplexField(data=data, pitch=pitch, wavelength=WAVELENGTH)


def blocks(shape, seed, block=3):
    """Random binary pattern of square blocks, for sharp-edged objects."""
    rows, cols = shape
    coarse = np.random.default_rng(seed).random((rows // block + 1, cols // block + 1)) > 0.5
    return np.kron(coarse, np.ones((block, block)))[:rows, :cols].astype(float)


def flat_surface(grid):
    return synthesize_coded_surface(0, grid, PITCH, 4 * PITCH, (1.0, 1.0), 0.0, wavelength=WAVELENGTH)


def textured_surface(grid, seed=3):
    return synthesize_coded_surface(seed, grid, PITCH, 4 * PITCH, (0.5, 1.0), 2 * np.pi, wavelength=WAVELENGTH)


def texture_layer(shape, depth, seed, offset=(0.0, 0.0)):
    reflectance = ComplexField(data=texture(shape, seed), pitch=PITCH, wavelength=WAVELENGTH)
    return ObjectLayer(reflectance=reflectance, depth=depth, lateral_offset=offset)


def pixel_raster(rows, cols, step):
    """Raster whose centred positions are whole multiples of `step` pixels."""
    return ScanTrajectory.raster(rows, cols, (cols - 1) * step * PITCH)


def meta(noise=None, seed=0):
    if noise is None:
        return AcquisitionMeta(defocus_d=DEFOCUS, wavelength=WAVELENGTH, pitch=PITCH, seed=seed)
    return AcquisitionMeta(defocus_d=DEFOCUS, wavelength=WAVELENGTH, pitch=PITCH, noise=noise, seed=seed)


def integer_shifts(trajectory, alpha):
    return np.round(alpha * trajectory.centered() / PITCH)


def shifted_stack(patterns, shift_tables):
    """Frames made of rolled copies of real patterns, one shift table per pattern."""
    count = len(shift_tables[0])
    frames = []
    for i in range(count):
        frame = np.zeros(patterns[0].shape)
        for pattern, shifts in zip(patterns, shift_tables):
            frame += shift_array(pattern, *shifts[i])
        frames.append(np.clip(frame, 0.0, None))
    return np.stack(frames)


def ptychogram_from_stack(stack, trajectory):
    return Ptychogram(
        frames=[IntensityFrame(data=frame, pitch=PITCH) for frame in stack],
        trajectory=trajectory,
        meta=meta(),
    )


def hypotheses_for(alphas, shift_tables):
    return [LayerHypothesis(alpha=alpha, shifts=shifts) for alpha, shifts in zip(alphas, shift_tables)]

