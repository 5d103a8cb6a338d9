import logging
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt, field_serializer, field_validator, model_validator
from scipy import ndimage

from ptycho_nlos.config import RecoveryConfig
from ptycho_nlos.exception import ConfigException, DataException, PtychoNLOSException
from ptycho_nlos.field import ComplexField, IntensityFrame, brenner_gradient, frozen_array, propagate
from ptycho_nlos.pipeline import SceneSpec, run_recovery, simulate_scene
from ptycho_nlos.recovery import recover_object
from ptycho_nlos.registration import FrameSpectra, scale_grid
from ptycho_nlos.scene import Ptychogram, ShiftGeometry, depth_from_scale
from ptycho_nlos.settings import executor
from ptycho_nlos.types import BoolArray, GridShape, RealArray

logger = logging.getLogger(__name__)

Box = tuple[int, int, int, int]

# curves whose spread is below this fraction of the segment energy count as flat
FLAT_TOLERANCE = 1e-9
SUPPORT_DILATION = 2


def _axis_bounds(length: int, count: int, overlap: float) -> list[tuple[int, int, int, int]]:
    """(start, stop, lead, trail) per tile; lead/trail are the overlap margins beyond the core."""
    core = length / count
    margin = overlap * core
    bounds = []
    for index in range(count):
        core_start, core_stop = int(round(index * core)), int(round((index + 1) * core))
        start = max(0, int(np.floor(core_start - margin)))
        stop = min(length, int(np.ceil(core_stop + margin)))
        bounds.append((start, stop, core_start - start, stop - core_stop))
    return bounds


class SegmentGrid(BaseModel):
    """Rectangular tiling of a field into rows × cols overlapping segments."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    rows: PositiveInt
    cols: PositiveInt
    overlap: float = Field(0.0, ge=0.0, lt=0.5)

    def __len__(self) -> int:
        return self.rows * self.cols

    def boxes(self, shape: GridShape) -> list[Box]:
        """(top, bottom, left, right) of each segment, row-major."""
        height, width = shape
        if height < self.rows or width < self.cols:
            raise DataException(f"Cannot split a {shape} field into {self.rows}x{self.cols} segments")
        row_bounds = _axis_bounds(height, self.rows, self.overlap)
        col_bounds = _axis_bounds(width, self.cols, self.overlap)
        return [(top, bottom, left, right) for top, bottom, _, _ in row_bounds for left, right, _, _ in col_bounds]

    def feather_weights(self, shape: GridShape) -> list[RealArray]:
        """Blend weights per segment: 1 in the core, linear ramps across overlaps."""
        height, width = shape
        row_weights = [_feather(*bounds) for bounds in _axis_bounds(height, self.rows, self.overlap)]
        col_weights = [_feather(*bounds) for bounds in _axis_bounds(width, self.cols, self.overlap)]
        return [np.outer(row, col) for row in row_weights for col in col_weights]


def _feather(start: int, stop: int, lead: int, trail: int) -> RealArray:
    position = np.arange(stop - start) + 0.5
    weights = np.ones(stop - start)
    if lead > 0:
        weights = np.minimum(weights, position / (2 * lead))
    if trail > 0:
        weights = np.minimum(weights, (stop - start - position) / (2 * trail))
    return weights


class DepthSweepResult(BaseModel):
    """Brenner curves per segment over a depth grid, and the interpolated best depths."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    depths: np.ndarray
    brenner: np.ndarray
    best_depth: list[float | None]
    segments: SegmentGrid

    @field_validator("depths", "brenner", mode="before")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        return frozen_array(value, np.float64)

    @model_validator(mode="after")
    def _consistent(self) -> "DepthSweepResult":
        if self.brenner.shape != (len(self.segments), self.depths.size):
            raise ValueError(f"Brenner table shape {self.brenner.shape} does not match segments x depths")
        if np.any(self.brenner < 0):
            raise ValueError("Brenner values must be nonnegative")
        low, high = self.depths.min(), self.depths.max()
        for depth in self.best_depth:
            if depth is not None and not low - 1e-12 <= depth <= high + 1e-12:
                raise ValueError(f"Best depth {depth} outside the sampled range [{low}, {high}]")
        return self

    @field_serializer("depths", "brenner")
    def _serialize_array(self, value: np.ndarray) -> list:
        return value.tolist()


class DepthMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    segment_depths: list[float]
    all_in_focus: IntensityFrame
    depth_raster: np.ndarray
    undefined_segments: NonNegativeInt = 0

    @field_validator("depth_raster", mode="before")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        return frozen_array(value, np.float64)

    @model_validator(mode="after")
    def _same_shape(self) -> "DepthMap":
        if self.depth_raster.shape != self.all_in_focus.shape:
            raise ValueError("Depth raster and all-in-focus image differ in shape")
        return self


class CrosstalkReport(BaseModel):
    """Residual contrast of layer 1's reconstruction against the gap Δz to layer 2."""

    delta_z: list[float]
    residual_contrast: list[float | None]
    resolved_delta_z: float | None = None
    failures: dict[str, str] = {}
    partial: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "CrosstalkReport":
        if any(later <= earlier for earlier, later in zip(self.delta_z, self.delta_z[1:])):
            raise ValueError("delta_z must be strictly increasing")
        if len(self.residual_contrast) != len(self.delta_z):
            raise ValueError("One residual contrast per delta_z is required")
        if any(value is not None and value < 0 for value in self.residual_contrast):
            raise ValueError("Residual contrast must be nonnegative")
        return self


def depth_grid(z_min: float, z_max: float, z_step: float) -> RealArray:
    if not z_min < z_max:
        raise ConfigException(f"Sweep needs z_min < z_max, got {z_min} and {z_max}")
    if z_step <= 0:
        raise ConfigException(f"Sweep step must be positive, got {z_step}")
    count = int(np.floor((z_max - z_min) / z_step + 1e-9)) + 1
    return z_min + z_step * np.arange(count)


def peak_location(grid: RealArray, curve: RealArray, energy: float) -> float | None:
    """
    Argmax refined by a parabola through the peak and its neighbours.

    Returns None when the curve is flat relative to `energy`. The sub-sample
    offset is limited to half a grid step.
    """
    if curve.max() - curve.min() <= FLAT_TOLERANCE * energy:
        return None
    index = int(np.argmax(curve))
    offset = 0.0
    if 0 < index < curve.size - 1:
        before, peak, after = curve[index - 1 : index + 2]
        curvature = before - 2 * peak + after
        if curvature < 0:
            offset = float(np.clip(0.5 * (before - after) / curvature, -0.5, 0.5))
    step = grid[1] - grid[0] if grid.size > 1 else 0.0
    return float(np.clip(grid[index] + offset * step, grid.min(), grid.max()))


def _refocus(wavefield: ComplexField, depth: float) -> RealArray:
    data = propagate(wavefield, -depth).data
    return data.real**2 + data.imag**2


def refocus_sweep(
    wavefield: ComplexField, segments: SegmentGrid, z_min: float, z_max: float, z_step: float
) -> DepthSweepResult:
    """
    Back-propagate a wall wavefield over a depth grid and score each segment.

    Parameters:
        wavefield (ComplexField): Recovered wall wavefield.
        segments (SegmentGrid): Tiling of the field.
        z_min (float): First depth in meters.
        z_max (float): Last depth in meters (included when on the grid).
        z_step (float): Grid step in meters.

    Returns:
        DepthSweepResult: Brenner curves and best depths, None for flat segments.
    """
    depths = depth_grid(z_min, z_max, z_step)
    boxes = segments.boxes(wavefield.shape)

    def measure(depth: float) -> tuple[list[float], list[float]]:
        image = _refocus(wavefield, depth)
        crops = [image[top:bottom, left:right] for top, bottom, left, right in boxes]
        return [brenner_gradient(crop) for crop in crops], [float(np.sum(crop**2)) for crop in crops]

    with executor() as pool:
        results = list(pool.map(measure, depths))

    brenner = np.array([scores for scores, _ in results]).T
    energy = np.array([energies for _, energies in results]).max(axis=0)
    best = [peak_location(depths, curve, scale) for curve, scale in zip(brenner, energy)]
    return DepthSweepResult(depths=depths, brenner=brenner, best_depth=best, segments=segments)


def _segment_centres(segments: SegmentGrid, shape: GridShape) -> RealArray:
    height, width = shape
    rows = (np.arange(segments.rows) + 0.5) * height / segments.rows
    cols = (np.arange(segments.cols) + 0.5) * width / segments.cols
    return np.array([(row, col) for row in rows for col in cols])


def _fill_undefined(best: Sequence[float | None], centres: RealArray) -> tuple[list[float], int]:
    defined = [index for index, depth in enumerate(best) if depth is not None]
    if not defined:
        raise DataException("No segment has a defined best depth")
    filled = []
    for index, depth in enumerate(best):
        if depth is None:
            distances = np.linalg.norm(centres[defined] - centres[index], axis=1)
            depth = best[defined[int(np.argmin(distances))]]
        filled.append(float(depth))
    return filled, len(best) - len(defined)


def compose_all_in_focus(wavefield: ComplexField, sweep: DepthSweepResult, segments: SegmentGrid) -> DepthMap:
    """
    Stitch per-segment refocused images into one all-in-focus image.

    Overlaps are blended with linear feathering. Segments without a defined
    depth take the depth of the nearest defined segment. The depth raster is
    the bilinear interpolation of segment depths at their centres.
    """
    if sweep.segments != segments:
        raise DataException("Sweep was computed on a different segment grid")
    shape = wavefield.shape
    boxes = segments.boxes(shape)
    depths, undefined = _fill_undefined(sweep.best_depth, _segment_centres(segments, shape))
    if undefined:
        logger.warning(f"{undefined} of {len(boxes)} segments had no defined depth and were filled from neighbours")

    refocused = {depth: _refocus(wavefield, depth) for depth in sorted(set(depths))}
    numerator = np.zeros(shape)
    denominator = np.zeros(shape)
    for (top, bottom, left, right), weights, depth in zip(boxes, segments.feather_weights(shape), depths):
        numerator[top:bottom, left:right] += weights * refocused[depth][top:bottom, left:right]
        denominator[top:bottom, left:right] += weights

    height, width = shape
    grid = np.array(depths).reshape(segments.rows, segments.cols)
    row_coords = (np.arange(height) + 0.5) * segments.rows / height - 0.5
    col_coords = (np.arange(width) + 0.5) * segments.cols / width - 0.5
    coords = np.meshgrid(row_coords, col_coords, indexing="ij")
    raster = ndimage.map_coordinates(grid, coords, order=1, mode="nearest")

    return DepthMap(
        segment_depths=depths,
        all_in_focus=IntensityFrame(data=numerator / denominator, pitch=wavefield.pitch),
        depth_raster=raster,
        undefined_segments=undefined,
    )


def segment_scale_scan(
    ptychogram: Ptychogram,
    segments: SegmentGrid,
    alpha_range: tuple[float, float] = (0.0, 1.2),
    alpha_step: float = 0.02,
) -> list[float | None]:
    """
    Best scale factor per image segment, by Brenner contrast of shift-and-add crops.

    Returns:
        list[float | None]: One factor per segment, None where the curve is flat.
    """
    alphas = scale_grid(alpha_range, alpha_step)
    spectra = FrameSpectra(ptychogram.stack())
    centered = ptychogram.trajectory.centered() / ptychogram.meta.pitch
    boxes = segments.boxes(ptychogram.shape)

    def measure(alpha: float) -> tuple[list[float], list[float]]:
        composite = np.maximum(spectra.composite(alpha * centered), 0.0)
        crops = [composite[top:bottom, left:right] for top, bottom, left, right in boxes]
        return [brenner_gradient(crop) for crop in crops], [float(np.sum(crop**2)) for crop in crops]

    with executor() as pool:
        results = list(pool.map(measure, alphas))
    curves = np.array([scores for scores, _ in results]).T
    energy = np.array([energies for _, energies in results]).max(axis=0)
    return [peak_location(alphas, curve, scale) for curve, scale in zip(curves, energy)]


def segment_depths(alphas: Sequence[float | None], geometry: ShiftGeometry) -> list[float | None]:
    return [None if alpha is None else depth_from_scale(alpha, geometry) for alpha in alphas]


def _support(obj: ComplexField) -> BoolArray:
    return ndimage.binary_dilation(np.abs(obj.data) > 0, iterations=SUPPORT_DILATION)


def _rms(values: RealArray) -> float:
    return float(np.sqrt(np.mean(values**2)))


def residual_contrast(reconstruction: ComplexField, first: ComplexField, second: ComplexField) -> float:
    """
    RMS of |reconstruction| where only the second object has support, over its RMS on the first's.
    """
    support_first = _support(first)
    exclusive = _support(second) & ~support_first
    if not exclusive.any() or not support_first.any():
        raise DataException("Objects leave no exclusive support to measure crosstalk on")
    modulus = np.abs(reconstruction.data)
    reference = _rms(modulus[support_first])
    if reference == 0:
        raise DataException("Reconstruction vanishes on the first object's support")
    return _rms(modulus[exclusive]) / reference


def _resolved_separation(delta_z: Sequence[float], contrast: Sequence[float | None]) -> float | None:
    measured = [(gap, value) for gap, value in zip(delta_z, contrast) if value is not None]
    if not measured:
        return None
    baseline = measured[0][1]
    for gap, value in measured:
        if value <= 0.5 * baseline:
            return gap
    return None


def residual_contrast_curve(
    scene_builder: Callable[[float], SceneSpec],
    delta_z: Sequence[float],
    pipeline_config: RecoveryConfig,
) -> CrosstalkReport:
    """
    Crosstalk of a second layer into the first as the gap between them grows.

    For every Δz the two-layer scene is simulated and recovered, the first layer
    is reconstructed at its depth and its residual contrast is measured.
    Failures are recorded and the report marked partial. The resolved gap is the
    first Δz whose contrast is at most half the contrast at the smallest measured Δz.

    Parameters:
        scene_builder (Callable[[float], SceneSpec]): Two-layer scene for a given Δz.
        delta_z (Sequence[float]): At least three strictly increasing gaps in meters.
        pipeline_config (RecoveryConfig): Recovery settings for every run.

    Returns:
        CrosstalkReport: Contrast per gap and the resolved separation.
    """
    delta_z = [float(gap) for gap in delta_z]
    if len(delta_z) < 3:
        raise ConfigException(f"Crosstalk analysis needs at least 3 delta_z values, got {len(delta_z)}")
    if any(later <= earlier for earlier, later in zip(delta_z, delta_z[1:])):
        raise ConfigException(f"delta_z values must be strictly increasing: {delta_z}")

    def measure(gap: float) -> float:
        scene = scene_builder(gap)
        ptychogram, truth = simulate_scene(scene)
        result = run_recovery(ptychogram, pipeline_config, truth=truth)
        target_alpha = truth.alphas[0]
        layer = min(result.state.layers, key=lambda estimate: abs(estimate.hypothesis.alpha - target_alpha))
        reconstruction = recover_object(
            layer.wavefield,
            scene.layers[0].depth,
            tv_weight=pipeline_config.reconstruction.tv_weight,
            tv_inner_steps=pipeline_config.reconstruction.tv_inner_steps,
        )
        return residual_contrast(reconstruction, truth.objects[0], truth.objects[1])

    def attempt(gap: float) -> tuple[float | None, str | None]:
        try:
            return measure(gap), None
        except PtychoNLOSException as exc:
            logger.warning(f"Crosstalk run at delta_z {gap} m failed: {exc}")
            return None, str(exc)

    with executor() as pool:
        outcomes = list(pool.map(attempt, delta_z))

    contrast = [value for value, _ in outcomes]
    failures = {repr(gap): error for gap, (_, error) in zip(delta_z, outcomes) if error is not None}
    return CrosstalkReport(
        delta_z=delta_z,
        residual_contrast=contrast,
        resolved_delta_z=_resolved_separation(delta_z, contrast),
        failures=failures,
        partial=bool(failures),
    )
