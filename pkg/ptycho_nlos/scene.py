import logging
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    field_serializer,
    field_validator,
    model_validator,
)
from scipy import ndimage, stats

from ptycho_nlos.enums import TargetKind
from ptycho_nlos.exception import ConfigException, DataException
from ptycho_nlos.field import (
    ComplexField,
    IntensityFrame,
    frozen_array,
    propagate,
    propagation_kernel,
    shift_array,
)
from ptycho_nlos.settings import executor
from ptycho_nlos.types import ComplexArray, GridShape, RealArray, ShiftTable

logger = logging.getLogger(__name__)

DEFAULT_WAVELENGTH = 532e-9
GUARD_FRACTION = 0.25

# FWHM of the autocorrelation of Gaussian-filtered white noise, in filter sigmas
_AUTOCORRELATION_FWHM_PER_SIGMA = 4.0 * np.sqrt(np.log(2.0))


class ObjectLayer(BaseModel):
    """A planar hidden object at distance `depth` from the wall."""

    model_config = ConfigDict(frozen=True)

    reflectance: ComplexField
    depth: PositiveFloat
    lateral_offset: tuple[float, float] = (0.0, 0.0)

    @field_validator("reflectance")
    @classmethod
    def _passive(cls, value: ComplexField) -> ComplexField:
        if np.max(np.abs(value.data)) > 1.0 + 1e-12:
            raise ValueError("Reflectance modulus must not exceed 1")
        return value


class ScanTrajectory(BaseModel):
    """Virtual-source positions (x, y) on the wall, in meters."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    positions: np.ndarray
    rows: PositiveInt | None = None
    cols: PositiveInt | None = None
    extent: PositiveFloat | None = None

    @field_validator("positions", mode="before")
    @classmethod
    def _validate_positions(cls, value: Any) -> np.ndarray:
        positions = frozen_array(value, np.float64)
        if positions.ndim != 2 or positions.shape[1] != 2:
            raise ValueError(f"Positions must be an (n, 2) table, got shape {positions.shape}")
        if not np.all(np.isfinite(positions)):
            raise ValueError("Positions contain non-finite values")
        if len(np.unique(positions, axis=0)) < 2:
            raise ValueError("A trajectory needs at least 2 distinct positions")
        return positions

    @field_serializer("positions")
    def _serialize_positions(self, positions: np.ndarray) -> list[list[float]]:
        return positions.tolist()

    @classmethod
    def raster(cls, rows: int, cols: int, extent: float) -> "ScanTrajectory":
        """
        Centred square raster scan, row by row.

        Parameters:
            rows (int): Number of scan rows.
            cols (int): Number of positions per row.
            extent (float): Side length of the scanned area in meters.

        Returns:
            ScanTrajectory: rows * cols positions spanning [-extent/2, extent/2].
        """
        xs = np.linspace(-extent / 2, extent / 2, cols)
        ys = np.linspace(-extent / 2, extent / 2, rows)
        grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
        positions = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)
        return cls(positions=positions, rows=rows, cols=cols, extent=extent)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def centered(self) -> np.ndarray:
        return self.positions - self.centroid


class CodedSurface(BaseModel):
    """The wall's complex modulation profile and how it was synthesized."""

    model_config = ConfigDict(frozen=True)

    profile: ComplexField
    seed: int | None = None
    correlation_length: PositiveFloat | None = None
    amp_range: tuple[float, float] | None = None
    phase_range: NonNegativeFloat | None = None

    @field_validator("profile")
    @classmethod
    def _modulus_range(cls, value: ComplexField) -> ComplexField:
        modulus = np.abs(value.data)
        if np.any(modulus <= 0) or np.any(modulus > 1.0 + 1e-12):
            raise ValueError("Coded surface modulus must lie in (0, 1]")
        return value


class NoiseModel(BaseModel):
    """Detector noise; all fields unset means noiseless frames."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    photon_scale: PositiveFloat | None = None
    read_sigma: NonNegativeFloat = 0.0
    bit_depth: int | None = Field(None, ge=1, le=32)

    @property
    def enabled(self) -> bool:
        return self.photon_scale is not None or self.read_sigma > 0 or self.bit_depth is not None


class AcquisitionMeta(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    defocus_d: PositiveFloat
    wavelength: PositiveFloat = DEFAULT_WAVELENGTH
    pitch: PositiveFloat
    noise: NoiseModel = NoiseModel()
    seed: NonNegativeInt = 0


class ShiftGeometry(BaseModel):
    """Parameters of the shift law alpha(z) = kappa * z_ref / z."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kappa: float = 1.0
    z_ref: PositiveFloat = 0.4


class Ptychogram(BaseModel):
    """Ordered intensity frames, one per trajectory position."""

    model_config = ConfigDict(frozen=True)

    frames: list[IntensityFrame]
    trajectory: ScanTrajectory
    meta: AcquisitionMeta

    @model_validator(mode="after")
    def _consistent(self) -> "Ptychogram":
        if len(self.frames) != len(self.trajectory):
            raise ValueError(
                f"{len(self.frames)} frames do not match {len(self.trajectory)} trajectory positions"
            )
        shapes = {frame.shape for frame in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"Frames have differing shapes: {sorted(shapes)}")
        if any(not np.isclose(frame.pitch, self.meta.pitch) for frame in self.frames):
            raise ValueError("Frame pitch differs from the acquisition pitch")
        return self

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> GridShape:
        return self.frames[0].shape

    def stack(self) -> RealArray:
        return np.stack([frame.data for frame in self.frames])


class GroundTruth(BaseModel):
    """Everything the simulator knows about a synthesized ptychogram."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    objects: list[ComplexField]
    wavefields: list[ComplexField]
    depths: list[float]
    alphas: list[float]
    shifts: list[np.ndarray]
    pixel_shifts: list[np.ndarray]
    coded_surface: CodedSurface
    clean_frames: list[np.ndarray]


class TargetParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shape: GridShape = (128, 128)
    pitch: PositiveFloat = 16e-6
    wavelength: PositiveFloat = DEFAULT_WAVELENGTH
    linewidths: list[PositiveFloat] = []
    text: str = ""
    font_size: PositiveInt = 48
    path: Path | None = None


def _smoothed_uniform(rng: np.random.Generator, grid: GridShape, sigma: float) -> RealArray:
    """Correlated noise with a uniform marginal on (0, 1)."""
    smooth = ndimage.gaussian_filter(rng.standard_normal(grid), sigma=sigma, mode="wrap")
    ranks = stats.rankdata(smooth, method="ordinal").reshape(grid)
    return (ranks - 0.5) / ranks.size


def synthesize_coded_surface(
    seed: int,
    grid: GridShape,
    pitch: float,
    correlation_length: float,
    amp_range: tuple[float, float],
    phase_range: float,
    wavelength: float = DEFAULT_WAVELENGTH,
) -> CodedSurface:
    """
    Random wall modulation with a given correlation length.

    Modulus and phase are Gaussian-smoothed white noise, rank-mapped to uniform
    distributions on [lo, hi] and [-phase_range/2, phase_range/2].

    Parameters:
        seed (int): Seed of the noise generator.
        grid (GridShape): Grid shape.
        pitch (float): Sample spacing in meters.
        correlation_length (float): Autocorrelation FWHM in meters, at least one pitch.
        amp_range (tuple[float, float]): Modulus bounds with 0 < lo <= hi <= 1.
        phase_range (float): Peak-to-peak phase in radians.
        wavelength (float): Wavelength carried by the profile.

    Returns:
        CodedSurface: The surface with its provenance.
    """
    lo, hi = amp_range
    if not 0 < lo <= hi <= 1:
        raise ConfigException(f"Amplitude range must satisfy 0 < lo <= hi <= 1, got {amp_range}")
    if correlation_length < pitch:
        raise ConfigException(
            f"Correlation length {correlation_length} m is shorter than the pitch {pitch} m"
        )

    rng = np.random.default_rng(seed)
    sigma = correlation_length / pitch / _AUTOCORRELATION_FWHM_PER_SIGMA
    modulus = lo + (hi - lo) * _smoothed_uniform(rng, grid, sigma)
    phase = phase_range * (_smoothed_uniform(rng, grid, sigma) - 0.5)

    profile = ComplexField(data=modulus * np.exp(1j * phase), pitch=pitch, wavelength=wavelength)
    return CodedSurface(
        profile=profile,
        seed=seed,
        correlation_length=correlation_length,
        amp_range=(lo, hi),
        phase_range=phase_range,
    )


def scale_factor(depth: float, geometry: ShiftGeometry) -> float:
    if depth <= 0:
        raise ConfigException(f"Depth must be positive, got {depth}")
    return geometry.kappa * geometry.z_ref / depth


def depth_from_scale(alpha: float, geometry: ShiftGeometry) -> float | None:
    """Invert the shift law; None when alpha cannot come from a finite positive depth."""
    if geometry.kappa == 0 or alpha == 0 or alpha * geometry.kappa < 0:
        return None
    return geometry.kappa * geometry.z_ref / alpha


def layer_shift_model(
    trajectory: ScanTrajectory, depth: float, geometry: ShiftGeometry
) -> ShiftTable:
    """
    Per-frame wall-plane shifts of a layer at `depth`, in meters.

    Returns:
        ShiftTable: alpha(depth) times the centred trajectory, one (x, y) row per frame.
    """
    return scale_factor(depth, geometry) * trajectory.centered()


def embed_object(layer: ObjectLayer, grid: GridShape, pitch: float) -> ComplexArray:
    """
    Place a layer's reflectance on the wall grid.

    An object smaller than the grid must stay inside the central window that
    leaves GUARD_FRACTION of the grid free on every side. An object exactly the
    size of the grid with no offset is taken as a full-field periodic object.
    """
    rows, cols = grid
    height, width = layer.reflectance.shape
    offset_x = int(round(layer.lateral_offset[0] / pitch))
    offset_y = int(round(layer.lateral_offset[1] / pitch))

    if (height, width) == (rows, cols) and offset_x == 0 and offset_y == 0:
        return np.array(layer.reflectance.data)

    guard_rows = int(np.ceil(GUARD_FRACTION * rows))
    guard_cols = int(np.ceil(GUARD_FRACTION * cols))
    top = (rows - height) // 2 + offset_y
    left = (cols - width) // 2 + offset_x
    if (
        top < guard_rows
        or top + height > rows - guard_rows
        or left < guard_cols
        or left + width > cols - guard_cols
    ):
        raise DataException(
            f"Object of shape {(height, width)} at offset ({offset_x}, {offset_y}) px leaves the "
            f"window rows {guard_rows}:{rows - guard_rows}, columns {guard_cols}:{cols - guard_cols} "
            f"of the {rows}x{cols} grid"
        )

    canvas = np.zeros(grid, dtype=np.complex128)
    canvas[top : top + height, left : left + width] = layer.reflectance.data
    return canvas


def _check_optics(field: ComplexField, meta: AcquisitionMeta, name: str) -> None:
    if not np.isclose(field.pitch, meta.pitch) or not np.isclose(field.wavelength, meta.wavelength):
        raise DataException(
            f"{name} sampled at pitch {field.pitch} m / wavelength {field.wavelength} m, "
            f"acquisition uses {meta.pitch} m / {meta.wavelength} m"
        )


def object_to_wall(layer: ObjectLayer, meta: AcquisitionMeta, grid: GridShape) -> ComplexField:
    """Wavefield W_j on the wall: the embedded object propagated by its depth."""
    _check_optics(layer.reflectance, meta, "Object")
    embedded = ComplexField(
        data=embed_object(layer, grid, meta.pitch), pitch=meta.pitch, wavelength=meta.wavelength
    )
    return propagate(embedded, layer.depth)


def split_tilted_object(
    reflectance: ComplexField,
    depth_start: float,
    depth_end: float,
    strips: int,
    lateral_offset: tuple[float, float] = (0.0, 0.0),
) -> list[ObjectLayer]:
    """
    Approximate an object tilted along x by vertical strips at increasing depths.

    Strip k keeps columns [k*w/strips, (k+1)*w/strips) of the reflectance and sits at
    the k-th of `strips` depths evenly spaced from depth_start to depth_end.
    """
    width = reflectance.shape[1]
    edges = np.linspace(0, width, strips + 1).round().astype(int)
    depths = np.linspace(depth_start, depth_end, strips)
    layers = []
    for k in range(strips):
        data = np.zeros_like(reflectance.data)
        data[:, edges[k] : edges[k + 1]] = reflectance.data[:, edges[k] : edges[k + 1]]
        layers.append(
            ObjectLayer(
                reflectance=reflectance.with_data(data),
                depth=float(depths[k]),
                lateral_offset=lateral_offset,
            )
        )
    return layers


def _bars(params: TargetParams) -> RealArray:
    rows, cols = params.shape
    canvas = np.zeros((rows, cols))
    widths = [max(1, int(round(linewidth / params.pitch))) for linewidth in params.linewidths]
    # three bars and two gaps per group, two bar widths between groups
    total = sum(5 * w for w in widths) + sum(2 * w for w in widths[:-1])
    cursor = (cols - total) // 2
    for w in widths:
        length = 5 * w
        top = (rows - length) // 2
        if cursor < 0 or top < 0 or cursor + 5 * w > cols:
            raise ConfigException(
                f"Bar groups with widths {widths} px do not fit a {rows}x{cols} target"
            )
        for bar in range(3):
            start = cursor + 2 * bar * w
            canvas[top : top + length, start : start + w] = 1.0
        cursor += 7 * w
    return canvas


def _text(params: TargetParams) -> RealArray:
    rows, cols = params.shape
    image = Image.new("L", (cols, rows), 0)
    if params.text:
        draw = ImageDraw.Draw(image)
        font = ImageFont.load_default(size=params.font_size)
        left, top, right, bottom = draw.textbbox((0, 0), params.text, font=font)
        position = ((cols - (right - left)) / 2 - left, (rows - (bottom - top)) / 2 - top)
        draw.text(position, params.text, fill=255, font=font)
    return (np.asarray(image) > 127).astype(np.float64)


def _image_file(params: TargetParams) -> RealArray:
    if params.path is None:
        return np.zeros(params.shape)
    rows, cols = params.shape
    try:
        with Image.open(params.path) as source:
            image = source.convert("L")
    except OSError as exc:
        raise DataException(f"Cannot read target image {params.path}: {exc}") from exc
    if image.size != (cols, rows):
        image = image.resize((cols, rows), Image.Resampling.BILINEAR)
    return np.asarray(image, dtype=np.float64) / 255.0


_TARGET_BUILDERS = {
    TargetKind.USAF_BARS: _bars,
    TargetKind.TEXT: _text,
    TargetKind.IMAGE_FILE: _image_file,
}


def make_test_target(kind: TargetKind, params: TargetParams) -> ComplexField:
    """
    Amplitude test target: three-bar groups, rasterized text or a grayscale image.

    Parameters:
        kind (TargetKind): Which pattern to draw.
        params (TargetParams): Shape, sampling and pattern parameters.

    Returns:
        ComplexField: Real reflectance in [0, 1]; all zeros when nothing is requested.
    """
    amplitude = _TARGET_BUILDERS[TargetKind(kind)](params)
    return ComplexField(data=amplitude, pitch=params.pitch, wavelength=params.wavelength)


def apply_noise(clean: list[RealArray], noise: NoiseModel, seed: int) -> list[RealArray]:
    """
    Poisson shot noise, Gaussian read noise and optional quantization.

    Frame i draws from default_rng([seed, i]) so results do not depend on
    execution order. Quantization uses the maximum of the clean stack as full scale.
    """
    if not noise.enabled:
        return clean
    full_scale = max(float(frame.max()) for frame in clean)

    def noisy(index: int) -> RealArray:
        rng = np.random.default_rng([seed, index])
        frame = clean[index]
        if noise.photon_scale is not None:
            frame = rng.poisson(frame * noise.photon_scale) / noise.photon_scale
        if noise.read_sigma > 0:
            frame = frame + rng.normal(0.0, noise.read_sigma, frame.shape)
        frame = np.clip(frame, 0.0, None)
        if noise.bit_depth is not None and full_scale > 0:
            levels = 2**noise.bit_depth - 1
            frame = np.round(np.clip(frame / full_scale, 0.0, 1.0) * levels) / levels * full_scale
        return frame

    with executor() as pool:
        return list(pool.map(noisy, range(len(clean))))


def simulate_ptychogram(
    layers: list[ObjectLayer],
    cs: CodedSurface,
    trajectory: ScanTrajectory,
    meta: AcquisitionMeta,
    geometry: ShiftGeometry,
) -> tuple[Ptychogram, GroundTruth]:
    """
    Synthesize a depth-multiplexed ptychogram.

    Frame i is the incoherent sum over layers of
    |propagate(shift(W_j, shift_ji) * CS, d)|², followed by detector noise.

    Parameters:
        layers (list[ObjectLayer]): Hidden objects.
        cs (CodedSurface): Wall modulation; its grid is the simulation grid.
        trajectory (ScanTrajectory): Virtual-source positions.
        meta (AcquisitionMeta): Optics, defocus and noise.
        geometry (ShiftGeometry): Shift law parameters.

    Returns:
        tuple[Ptychogram, GroundTruth]: Frames and the record used to produce them.
    """
    if not layers:
        raise ConfigException("A scene needs at least one object layer")
    _check_optics(cs.profile, meta, "Coded surface")
    grid = cs.profile.shape
    limit = min(grid) / 2

    objects, wavefields, alphas, shifts, pixel_shifts = [], [], [], [], []
    for index, layer in enumerate(layers):
        wavefield = object_to_wall(layer, meta, grid)
        table = layer_shift_model(trajectory, layer.depth, geometry)
        pixels = table / meta.pitch
        if np.max(np.abs(pixels)) >= limit:
            raise ConfigException(
                f"Layer {index} at depth {layer.depth} m shifts by up to "
                f"{np.max(np.abs(pixels)):.1f} px, beyond half the {grid} grid"
            )
        objects.append(wavefield.with_data(embed_object(layer, grid, meta.pitch)))
        wavefields.append(wavefield)
        alphas.append(scale_factor(layer.depth, geometry))
        shifts.append(table)
        pixel_shifts.append(pixels)

    kernel = propagation_kernel(grid, meta.pitch, meta.wavelength, meta.defocus_d)
    surface = cs.profile.data

    def clean_frame(index: int) -> RealArray:
        total = np.zeros(grid)
        for wavefield, pixels in zip(wavefields, pixel_shifts):
            dx, dy = pixels[index]
            sensor = kernel.apply(shift_array(wavefield.data, dx, dy) * surface)
            total += sensor.real**2 + sensor.imag**2
        return total

    with executor() as pool:
        clean = list(pool.map(clean_frame, range(len(trajectory))))
    measured = apply_noise(clean, meta.noise, meta.seed)

    logger.info(
        f"Simulated {len(trajectory)} frames of {grid} from {len(layers)} layers "
        f"(alphas {[round(a, 4) for a in alphas]})"
    )

    ptychogram = Ptychogram(
        frames=[IntensityFrame(data=frame, pitch=meta.pitch) for frame in measured],
        trajectory=trajectory,
        meta=meta,
    )
    truth = GroundTruth(
        objects=objects,
        wavefields=wavefields,
        depths=[layer.depth for layer in layers],
        alphas=alphas,
        shifts=shifts,
        pixel_shifts=pixel_shifts,
        coded_surface=cs,
        clean_frames=clean,
    )
    return ptychogram, truth
