from functools import lru_cache
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, field_validator
from scipy import fft, ndimage

from ptycho_nlos.exception import DataException
from ptycho_nlos.settings import worker_count
from ptycho_nlos.types import ComplexArray, GridShape, RealArray


def frozen_array(value: Any, dtype: Any) -> np.ndarray:
    """Copy `value` into a read-only array of the given dtype."""
    array = np.array(value, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


class ComplexField(BaseModel):
    """
    Complex wavefield sampled on a regular grid.

    Values are immutable: `data` is stored as a read-only copy, so fields can be
    shared between workers.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    pitch: PositiveFloat
    wavelength: PositiveFloat

    @field_validator("data", mode="before")
    @classmethod
    def _validate_data(cls, value: Any) -> np.ndarray:
        array = frozen_array(value, np.complex128)
        if array.ndim != 2 or min(array.shape) < 2:
            raise ValueError(
                f"Field data must be a 2-D grid of at least 2x2 samples, got shape {array.shape}"
            )
        if not np.all(np.isfinite(array)):
            raise ValueError("Field data contains non-finite samples")
        return array

    @property
    def shape(self) -> GridShape:
        return self.data.shape[0], self.data.shape[1]

    @property
    def energy(self) -> float:
        return float(np.sum(self.data.real**2 + self.data.imag**2))

    def with_data(self, data: Any) -> "ComplexField":
        """Return a field with new samples on the same grid, pitch and wavelength."""
        return ComplexField(data=data, pitch=self.pitch, wavelength=self.wavelength)


class IntensityFrame(BaseModel):
    """Nonnegative detector intensity on a regular grid."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    pitch: PositiveFloat

    @field_validator("data", mode="before")
    @classmethod
    def _validate_data(cls, value: Any) -> np.ndarray:
        array = frozen_array(value, np.float64)
        if array.ndim != 2 or array.size == 0:
            raise ValueError(f"Intensity data must be a non-empty 2-D grid, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("Intensity data contains non-finite samples")
        if np.any(array < 0):
            raise ValueError("Intensity data contains negative samples")
        return array

    @property
    def shape(self) -> GridShape:
        return self.data.shape[0], self.data.shape[1]


def band_limit(samples: int, pitch: float, wavelength: float, distance: float) -> float:
    """
    Highest spatial frequency the band-limited angular spectrum keeps along one axis.

    Parameters:
        samples (int): Number of samples along the axis.
        pitch (float): Sample spacing in meters.
        wavelength (float): Wavelength in meters.
        distance (float): Propagation distance in meters (sign is ignored).

    Returns:
        float: Frequency limit in cycles per meter.
    """
    extent = samples * pitch
    return 1.0 / (wavelength * np.sqrt((2.0 * abs(distance) / extent) ** 2 + 1.0))


class PropagationKernel(BaseModel):
    """Band-limited angular spectrum transfer function for one distance and grid."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    distance: float
    shape: GridShape
    pitch: PositiveFloat
    wavelength: PositiveFloat
    transfer: np.ndarray
    band_mask: np.ndarray

    @classmethod
    def build(
        cls, shape: GridShape, pitch: float, wavelength: float, distance: float
    ) -> "PropagationKernel":
        """
        Compute the transfer function for free-space propagation by `distance`.

        Parameters:
            shape (GridShape): Grid shape (rows, columns).
            pitch (float): Sample spacing in meters.
            wavelength (float): Wavelength in meters.
            distance (float): Signed propagation distance in meters.

        Returns:
            PropagationKernel: The kernel; samples outside the band mask are zero.

        Raises:
            DataException: If the band limit leaves no propagating frequency besides DC
                along an axis.
        """
        rows, cols = shape
        for axis, samples in (("rows", rows), ("columns", cols)):
            if band_limit(samples, pitch, wavelength, distance) < 1.0 / (samples * pitch):
                raise DataException(
                    f"Grid too small to propagate {distance} m: the band limit along {axis} "
                    f"({samples} samples of {pitch} m) keeps no propagating frequency"
                )

        fy = fft.fftfreq(rows, d=pitch)
        fx = fft.fftfreq(cols, d=pitch)
        freq_y, freq_x = np.meshgrid(fy, fx, indexing="ij")
        argument = 1.0 / wavelength**2 - freq_x**2 - freq_y**2

        band_mask = (
            (argument > 0)
            & (np.abs(freq_x) <= band_limit(cols, pitch, wavelength, distance))
            & (np.abs(freq_y) <= band_limit(rows, pitch, wavelength, distance))
        )
        kz = np.sqrt(np.where(band_mask, argument, 0.0))
        transfer = np.where(band_mask, np.exp(2j * np.pi * distance * kz), 0.0)

        return cls(
            distance=distance,
            shape=(rows, cols),
            pitch=pitch,
            wavelength=wavelength,
            transfer=frozen_array(transfer, np.complex128),
            band_mask=frozen_array(band_mask, np.bool_),
        )

    def apply(self, data: ComplexArray) -> ComplexArray:
        """Propagate raw samples on the kernel's grid."""
        workers = worker_count()
        return fft.ifft2(fft.fft2(data, workers=workers) * self.transfer, workers=workers)


@lru_cache(maxsize=64)
def propagation_kernel(
    shape: GridShape, pitch: float, wavelength: float, distance: float
) -> PropagationKernel:
    return PropagationKernel.build(shape, pitch, wavelength, distance)


def propagate(field: ComplexField, distance: float) -> ComplexField:
    """
    Propagate a field through free space with the band-limited angular spectrum method.

    Boundaries are circular. A zero distance returns the input unchanged.

    Parameters:
        field (ComplexField): Input field.
        distance (float): Signed distance in meters.

    Returns:
        ComplexField: Field on the same grid after propagation.
    """
    if not np.isfinite(distance):
        raise DataException(f"Propagation distance must be finite, got {distance}")
    if distance == 0:
        return field

    kernel = propagation_kernel(field.shape, field.pitch, field.wavelength, float(distance))
    return field.with_data(kernel.apply(field.data))


def shift_array(data: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """
    Circularly translate raw samples by (dx, dy) pixels, x along columns.

    Integer shifts are index rolls; fractional shifts apply a Fourier phase ramp.
    Real input gives real output.
    """
    if dx == 0 and dy == 0:
        return data
    if float(dx).is_integer() and float(dy).is_integer():
        return np.roll(data, (int(dy), int(dx)), axis=(0, 1))

    workers = worker_count()
    spectrum = ndimage.fourier_shift(fft.fft2(data, workers=workers), (dy, dx))
    shifted = fft.ifft2(spectrum, workers=workers)
    return shifted if np.iscomplexobj(data) else shifted.real


def check_shift(shape: GridShape, dx: float, dy: float) -> None:
    limit = min(shape) / 2
    if not (abs(dx) < limit and abs(dy) < limit):
        raise DataException(
            f"Shift ({dx}, {dy}) px exceeds half the grid ({limit} px) for shape {shape}"
        )


def shift_field(field: ComplexField, dx: float, dy: float) -> ComplexField:
    """
    Translate a field by (dx, dy) pixels with circular wrap-around.

    Parameters:
        field (ComplexField): Input field.
        dx (float): Shift along columns in pixels.
        dy (float): Shift along rows in pixels.

    Returns:
        ComplexField: The translated field.
    """
    check_shift(field.shape, dx, dy)
    return field.with_data(shift_array(field.data, dx, dy))


def intensity(field: ComplexField) -> IntensityFrame:
    data = field.data
    return IntensityFrame(data=data.real**2 + data.imag**2, pitch=field.pitch)


def brenner_gradient(data: RealArray) -> float:
    """Brenner focus measure of raw samples: squared differences at a 2-column stride."""
    if data.shape[1] < 3:
        raise DataException(f"Brenner index needs at least 3 columns, got {data.shape[1]}")
    difference = data[:, 2:] - data[:, :-2]
    return float(np.sum(difference * difference))


def brenner_index(frame: IntensityFrame) -> float:
    """
    Brenner contrast index Σ (I(x+2, y) − I(x, y))² along x.

    Parameters:
        frame (IntensityFrame): Frame with at least 3 columns.

    Returns:
        float: Nonnegative contrast value.
    """
    return brenner_gradient(frame.data)
