import logging
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeInt, field_serializer, field_validator, model_validator
from scipy import fft, signal
from skimage.registration import phase_cross_correlation

from ptycho_nlos.exception import ConfigException, DataException
from ptycho_nlos.field import IntensityFrame, brenner_gradient, frozen_array, shift_array
from ptycho_nlos.scene import Ptychogram, ScanTrajectory
from ptycho_nlos.settings import executor, worker_count
from ptycho_nlos.types import RealArray, ShiftTable

logger = logging.getLogger(__name__)


class ScaleScanResult(BaseModel):
    """
    Brenner contrast of shift-and-add composites over a grid of scale factors.

    `moving_curve` is the same scan with the mean frame removed from every
    frame first; peaks are located on it.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    alphas: np.ndarray
    brenner_curve: np.ndarray
    peaks: list[tuple[float, float]]
    moving_curve: np.ndarray | None = None

    @field_validator("alphas", "brenner_curve", "moving_curve", mode="before")
    @classmethod
    def _as_vector(cls, value: Any) -> np.ndarray | None:
        if value is None:
            return None
        array = frozen_array(value, np.float64)
        if array.ndim != 1:
            raise ValueError(f"Expected a 1-D sequence, got shape {array.shape}")
        return array

    @model_validator(mode="after")
    def _consistent(self) -> "ScaleScanResult":
        if self.alphas.shape != self.brenner_curve.shape:
            raise ValueError("Scale grid and Brenner curve differ in length")
        if np.any(self.brenner_curve < 0):
            raise ValueError("Brenner values must be nonnegative")
        if self.moving_curve is not None:
            if self.moving_curve.shape != self.alphas.shape:
                raise ValueError("Scale grid and moving-part curve differ in length")
            if np.any(self.moving_curve < 0):
                raise ValueError("Brenner values must be nonnegative")
        peak_alphas = [alpha for alpha, _ in self.peaks]
        if peak_alphas != sorted(peak_alphas):
            raise ValueError("Peaks must be ordered by scale factor")
        return self

    @field_serializer("alphas", "brenner_curve", "moving_curve")
    def _serialize_vector(self, value: np.ndarray | None) -> list[float] | None:
        return None if value is None else value.tolist()


class LayerHypothesis(BaseModel):
    """A detected layer: its scale factor and per-frame pixel shifts (dx, dy)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    alpha: float
    shifts: np.ndarray
    refinement_history: list[float] = []
    low_correlation_frames: NonNegativeInt = 0

    @field_validator("shifts", mode="before")
    @classmethod
    def _validate_shifts(cls, value: Any) -> np.ndarray:
        shifts = frozen_array(value, np.float64)
        if shifts.ndim != 2 or shifts.shape[1] != 2:
            raise ValueError(f"Shifts must be an (n, 2) table, got shape {shifts.shape}")
        if not np.all(np.isfinite(shifts)):
            raise ValueError("Shifts contain non-finite values")
        return shifts

    @field_serializer("shifts")
    def _serialize_shifts(self, shifts: np.ndarray) -> list[list[float]]:
        return shifts.tolist()


class FrameSpectra:
    """
    Spectra of a frame stack, ready for repeated back-shift-and-average.

    Each composite is one inverse FFT of Σ F_i · ramp_i, with separable phase ramps.
    """

    def __init__(self, stack: RealArray) -> None:
        self.count, rows, cols = stack.shape
        self.spectra = fft.fft2(stack, workers=worker_count())
        self._fy = fft.fftfreq(rows)
        self._fx = fft.fftfreq(cols)

    def composite(self, shifts: ShiftTable) -> RealArray:
        """Average of the frames translated by -shifts[i]."""
        if len(shifts) != self.count:
            raise DataException(f"{len(shifts)} shifts given for {self.count} frames")
        total = np.zeros(self.spectra.shape[1:], dtype=np.complex128)
        for spectrum, (dx, dy) in zip(self.spectra, shifts):
            ramp_y = np.exp(2j * np.pi * self._fy * dy)
            ramp_x = np.exp(2j * np.pi * self._fx * dx)
            total += spectrum * ramp_y[:, None] * ramp_x[None, :]
        return fft.ifft2(total / self.count, workers=worker_count()).real


def pixel_shifts(trajectory: ScanTrajectory, alpha: float, pitch: float) -> ShiftTable:
    return alpha * trajectory.centered() / pitch


def shift_and_add_shifts(stack: RealArray, shifts: ShiftTable) -> RealArray:
    """
    Back-shift every frame by its own shift and average.

    The result is linear in the stack. Subpixel shifts can ring slightly below
    zero; callers that need an intensity clip it themselves.

    Parameters:
        stack (RealArray): Frames as an (n, rows, cols) array.
        shifts (ShiftTable): (n, 2) pixel shifts (dx, dy).

    Returns:
        RealArray: Composite on the frame grid.
    """
    return FrameSpectra(stack).composite(shifts)


def shift_and_add(
    ptychogram: Ptychogram, alpha: float, trajectory: ScanTrajectory | None = None
) -> IntensityFrame:
    """
    Composite that brings the layer with scale factor `alpha` into register.

    Negative ringing is clipped to 0 so the result is a valid intensity.

    Parameters:
        ptychogram (Ptychogram): Measured frames.
        alpha (float): Scale factor applied to the centred trajectory.
        trajectory (ScanTrajectory | None): Overrides the ptychogram's trajectory.

    Returns:
        IntensityFrame: The shift-and-add image.
    """
    trajectory = trajectory or ptychogram.trajectory
    shifts = pixel_shifts(trajectory, alpha, ptychogram.meta.pitch)
    composite = shift_and_add_shifts(ptychogram.stack(), shifts)
    return IntensityFrame(data=np.maximum(composite, 0.0), pitch=ptychogram.meta.pitch)


def scale_grid(alpha_range: tuple[float, float], alpha_step: float) -> RealArray:
    low, high = alpha_range
    if alpha_step <= 0:
        raise ConfigException(f"Scale step must be positive, got {alpha_step}")
    if high < low:
        raise ConfigException(f"Scale range {alpha_range} is empty")
    count = int(np.floor((high - low) / alpha_step + 1e-9)) + 1
    return np.round(low + alpha_step * np.arange(count), 12)


RIPPLE_FRACTION = 0.02
# moving-part contrast below this share of the full contrast is round-off
STATIC_TOLERANCE = 1e-10


def detect_peaks(
    curve: RealArray, min_prominence_fraction: float, relative: bool = False
) -> list[tuple[int, float]]:
    """
    Interior local maxima whose prominence reaches a fraction of the curve's range.

    With `relative` set, each peak is instead measured against its own height
    above the curve minimum, so a weak layer standing clear of its
    surroundings counts next to a much brighter one. Ripples below
    `RIPPLE_FRACTION` of the range are ignored in that mode.

    Parameters:
        curve (RealArray): Sampled curve.
        min_prominence_fraction (float): Threshold relative to max - min, or to the peak height.
        relative (bool): Measure prominence against the peak's own height.

    Returns:
        list[tuple[int, float]]: (index, prominence) pairs in index order; empty for a flat curve.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 1 or curve.size < 3:
        raise DataException(f"Peak detection needs a 1-D curve of at least 3 samples, got {curve.shape}")
    floor = float(curve.min())
    span = float(curve.max() - floor)
    if span <= 0:
        return []
    if not relative:
        indices, properties = signal.find_peaks(curve, prominence=min_prominence_fraction * span)
        return [(int(index), float(prominence)) for index, prominence in zip(indices, properties["prominences"])]

    indices, properties = signal.find_peaks(curve, prominence=RIPPLE_FRACTION * span)
    return [
        (int(index), float(prominence))
        for index, prominence in zip(indices, properties["prominences"])
        if prominence >= min_prominence_fraction * (curve[index] - floor)
    ]


def scan_scale_factors(
    ptychogram: Ptychogram,
    trajectory: ScanTrajectory | None = None,
    alpha_range: tuple[float, float] = (0.0, 1.2),
    alpha_step: float = 0.02,
    min_prominence_fraction: float = 0.15,
) -> ScaleScanResult:
    """
    Sweep the scale factor and locate the layers as Brenner contrast peaks.

    `brenner_curve` scores the plain shift-and-add composites. Peaks are found
    on `moving_curve`, which scores composites of the frames minus their mean:
    the wall's own static pattern cancels there, so its large lobe at alpha 0
    does not set the prominence scale. Each peak is judged against its own
    height. When nothing moves, the curve maximum at alpha 0 is reported as
    the single static layer.

    Parameters:
        ptychogram (Ptychogram): Measured frames.
        trajectory (ScanTrajectory | None): Overrides the ptychogram's trajectory.
        alpha_range (tuple[float, float]): Inclusive scan bounds.
        alpha_step (float): Grid spacing.
        min_prominence_fraction (float): Peak prominence threshold relative to the peak height.

    Returns:
        ScaleScanResult: Grid, both curves and (alpha, prominence) peaks.
    """
    trajectory = trajectory or ptychogram.trajectory
    if len(trajectory) != ptychogram.frame_count:
        raise DataException(
            f"Trajectory has {len(trajectory)} positions for {ptychogram.frame_count} frames"
        )
    alphas = scale_grid(alpha_range, alpha_step)
    if alphas.size < 3:
        raise ConfigException(f"Scale grid of {alphas.size} samples is too short to locate peaks")

    stack = ptychogram.stack()
    spectra = FrameSpectra(stack)
    moving_spectra = FrameSpectra(stack - stack.mean(axis=0))
    centered = trajectory.centered() / ptychogram.meta.pitch

    def evaluate(alpha: float) -> tuple[float, float]:
        shifts = alpha * centered
        return (
            brenner_gradient(np.maximum(spectra.composite(shifts), 0.0)),
            brenner_gradient(moving_spectra.composite(shifts)),
        )

    with executor() as pool:
        curve, moving = (np.array(values) for values in zip(*pool.map(evaluate, alphas)))

    if moving.max() > STATIC_TOLERANCE * curve.max():
        found = detect_peaks(moving, min_prominence_fraction, relative=True)
        peaks = [(float(alphas[index]), prominence) for index, prominence in found]
    else:
        peaks = []
    if not peaks:
        peaks = _static_peak(alphas, curve)

    logger.info(f"Scale scan over {alphas.size} factors found peaks at {[alpha for alpha, _ in peaks]}")
    return ScaleScanResult(alphas=alphas, brenner_curve=curve, peaks=peaks, moving_curve=moving)


def _static_peak(alphas: RealArray, curve: RealArray) -> list[tuple[float, float]]:
    """The alpha 0 sample as a peak, if the grid holds it and the curve is highest there."""
    zero = int(np.argmin(np.abs(alphas)))
    if not np.isclose(alphas[zero], 0.0, atol=1e-9) or int(np.argmax(curve)) != zero:
        return []
    prominence = float(curve[zero] - curve.min())
    return [(0.0, prominence)] if prominence > 0 else []


def initial_hypotheses(
    scan: ScaleScanResult, ptychogram: Ptychogram, trajectory: ScanTrajectory | None = None
) -> list[LayerHypothesis]:
    """One hypothesis per detected peak, with shifts predicted by the scaled trajectory."""
    trajectory = trajectory or ptychogram.trajectory
    return [
        LayerHypothesis(alpha=alpha, shifts=pixel_shifts(trajectory, alpha, ptychogram.meta.pitch))
        for alpha, _ in scan.peaks
    ]


def apodization_window(shape: tuple[int, int], alpha: float = 0.2) -> RealArray:
    rows, cols = shape
    return np.outer(signal.windows.tukey(rows, alpha), signal.windows.tukey(cols, alpha))


def _register(
    reference: RealArray, moving: RealArray, window: RealArray, upsample_factor: int
) -> tuple[float, float, float]:
    """
    Translation (dx, dy) carrying `reference` onto `moving`, and their normalized peak correlation.
    """
    reference = (reference - reference.mean()) * window
    moving = (moving - moving.mean()) * window
    norm = np.sqrt(np.sum(reference**2) * np.sum(moving**2))
    if norm == 0:
        return 0.0, 0.0, 0.0

    shift = phase_cross_correlation(
        reference, moving, upsample_factor=upsample_factor, normalization=None
    )[0]
    registered = shift_array(moving, float(shift[1]), float(shift[0]))
    peak = float(np.sum(reference * registered) / norm)
    return -float(shift[1]), -float(shift[0]), peak


def refine_shifts(
    ptychogram: Ptychogram,
    hypotheses: list[LayerHypothesis],
    passes: int = 3,
    upsample_factor: int = 20,
    max_correction: float = 2.0,
    correlation_floor: float = 0.05,
) -> list[LayerHypothesis]:
    """
    Refine per-frame layer shifts by subpixel cross-correlation.

    Each pass rebuilds every layer's reference from the frames with the other
    layers' current zero-mean references removed, then registers each residual
    frame against it. The mean correction over accepted frames is removed so
    the scan centroid does not drift, then each correction is clamped to
    `max_correction` pixels. Frames whose normalized correlation peak falls
    below `correlation_floor` keep their shift.

    Parameters:
        ptychogram (Ptychogram): Measured frames.
        hypotheses (list[LayerHypothesis]): Initial layer hypotheses.
        passes (int): Number of refinement passes.
        upsample_factor (int): Subpixel precision is 1 / upsample_factor.
        max_correction (float): Largest per-pass correction in pixels.
        correlation_floor (float): Minimum normalized correlation peak.

    Returns:
        list[LayerHypothesis]: Hypotheses with refined shifts and per-pass RMS corrections.
    """
    count = ptychogram.frame_count
    for hypothesis in hypotheses:
        if len(hypothesis.shifts) != count:
            raise DataException(
                f"Hypothesis at alpha {hypothesis.alpha} has {len(hypothesis.shifts)} shifts "
                f"for {count} frames"
            )
    if not hypotheses or passes == 0:
        return list(hypotheses)

    stack = ptychogram.stack()
    window = apodization_window(ptychogram.shape)
    shifts = [np.array(hypothesis.shifts) for hypothesis in hypotheses]
    histories: list[list[float]] = [list(hypothesis.refinement_history) for hypothesis in hypotheses]
    low_correlation = [hypothesis.low_correlation_frames for hypothesis in hypotheses]

    spectra = FrameSpectra(stack)
    references = [spectra.composite(layer_shifts) for layer_shifts in shifts]

    with executor() as pool:
        for _ in range(passes):
            zero_mean = [reference - reference.mean() for reference in references]
            new_references, new_shifts = [], []

            for j, layer_shifts in enumerate(shifts):

                def residual(i: int, j: int = j) -> RealArray:
                    frame = stack[i].copy()
                    for k, other in enumerate(zero_mean):
                        if k != j:
                            frame -= shift_array(other, *shifts[k][i])
                    return frame

                residuals = np.stack(list(pool.map(residual, range(count))))
                reference = FrameSpectra(residuals).composite(layer_shifts)

                def correct(i: int, reference: RealArray = reference, layer_shifts: ShiftTable = layer_shifts):
                    aligned = shift_array(residuals[i], -layer_shifts[i][0], -layer_shifts[i][1])
                    return _register(reference, aligned, window, upsample_factor)

                results = list(pool.map(correct, range(count)))
                corrections = np.array([[dx, dy] for dx, dy, _ in results])
                accepted = np.array([peak >= correlation_floor for _, _, peak in results])

                corrections[~accepted] = 0.0
                if accepted.any():
                    corrections[accepted] -= corrections[accepted].mean(axis=0)
                corrections = np.clip(corrections, -max_correction, max_correction)

                rejected = int(np.count_nonzero(~accepted))
                if rejected:
                    logger.warning(
                        f"Layer at alpha {hypotheses[j].alpha}: {rejected} frames below correlation "
                        f"floor {correlation_floor}, shifts kept"
                    )
                low_correlation[j] += rejected
                histories[j].append(float(np.sqrt(np.mean(np.sum(corrections**2, axis=1)))))
                new_shifts.append(layer_shifts + corrections)
                new_references.append(reference)

            shifts = new_shifts
            references = new_references

    refined = []
    for hypothesis, layer_shifts, history, rejected in zip(hypotheses, shifts, histories, low_correlation):
        if any(later > earlier for earlier, later in zip(history, history[1:])):
            logger.warning(f"Shift refinement for alpha {hypothesis.alpha} is not converging: {history}")
        refined.append(
            LayerHypothesis(
                alpha=hypothesis.alpha,
                shifts=layer_shifts,
                refinement_history=history,
                low_correlation_frames=rejected,
            )
        )
    return refined
