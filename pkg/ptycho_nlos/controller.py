import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from typing import Optional

import numpy as np
from pydantic import ValidationError

from ptycho_nlos.config import ReconConfig
from ptycho_nlos.enums import FrameOrder, ReconEvent
from ptycho_nlos.exception import ConfigException, DataException, NumericalException
from ptycho_nlos.field import ComplexField, IntensityFrame, propagation_kernel, shift_array
from ptycho_nlos.processors.base import ProcessorBase
from ptycho_nlos.registration import LayerHypothesis, shift_and_add_shifts
from ptycho_nlos.scene import Ptychogram
from ptycho_nlos.settings import executor
from ptycho_nlos.state import ConvergenceReport, FrameWavefields, LayerEstimate, ReconState
from ptycho_nlos.types import ComplexArray, PayloadType

logger = logging.getLogger(__name__)

FrameIncrements = tuple[list[ComplexArray], ComplexArray]


def magnitude_project(
    fw: FrameWavefields, measured: IntensityFrame, epsilon_div: float
) -> FrameWavefields:
    """
    Rescale every mixture component by the shared factor √(I_meas / (I_est + ε)).

    Parameters:
        fw (FrameWavefields): Current sensor-plane components of one frame.
        measured (IntensityFrame): Measured intensity of that frame.
        epsilon_div (float): Division guard, positive.

    Returns:
        FrameWavefields: Components with corrected modulus and unchanged phase.
    """
    if measured.shape != fw.intensity.shape:
        raise DataException(f"Measured frame shape {measured.shape} differs from estimate {fw.intensity.shape}")
    if epsilon_div <= 0:
        raise ConfigException(f"Division guard must be positive, got {epsilon_div}")
    factor = np.sqrt(measured.data / (fw.intensity.data + epsilon_div))
    return FrameWavefields.from_components([component.with_data(component.data * factor) for component in fw.components])


class ReconstructionController:
    """Joint recovery of the coded surface and the layer wavefields from a ptychogram."""

    def __init__(self, config: ReconConfig) -> None:
        """
        Parameters:
            config (ReconConfig): Step sizes, epochs, frame order and regularization.
        """
        self.config = config
        self._processors: list[ProcessorBase] = []
        self._defocus: float | None = config.defocus_d
        self.context: dict = {}

    @contextmanager
    def set_context(self, context: dict):
        """
        Context manager to set and reset the context handed to processors.
        """
        self.context = context
        try:
            yield
        finally:
            self.context = {}

    def register_processor(self, processor: ProcessorBase):
        self._processors.append(processor)

    def _notify_processors(self, event: ReconEvent, state: ReconState, payload: Optional[PayloadType]):
        """
        Notify all registered processors about a reconstruction event.

        Parameters:
            event (ReconEvent): What happened.
            state (ReconState): The state after the event.
            payload (Optional[PayloadType]): Event data, the convergence report on FINISHED.
        """
        for processor in self._processors:
            processor.process(event, state, payload, self.context)

    def _propagate(self, data: ComplexArray, pitch: float, wavelength: float, sign: int) -> ComplexArray:
        if self._defocus is None:
            raise ConfigException("Defocus distance unknown: initialize the state or set defocus_d")
        if self._defocus == 0:
            return data
        kernel = propagation_kernel(data.shape, pitch, wavelength, sign * self._defocus)
        return kernel.apply(data)

    @staticmethod
    def _check_hypotheses(ptychogram: Ptychogram, hypotheses: Sequence[LayerHypothesis]) -> None:
        if not hypotheses:
            raise ConfigException("Reconstruction needs at least one layer hypothesis")
        for hypothesis in hypotheses:
            if len(hypothesis.shifts) != ptychogram.frame_count:
                raise DataException(
                    f"Hypothesis at alpha {hypothesis.alpha} has {len(hypothesis.shifts)} shifts "
                    f"for {ptychogram.frame_count} frames"
                )

    def initialize_state(self, ptychogram: Ptychogram, hypotheses: Sequence[LayerHypothesis]) -> ReconState:
        """
        Back-shifted composites for the layers and the mean frame for the coded surface.

        W_j starts as √(shift_and_add_j) / L and CS as √(mean frame) scaled to unit
        mean modulus, both with zero phase.
        """
        self._check_hypotheses(ptychogram, hypotheses)
        if self.config.defocus_d is None:
            self._defocus = ptychogram.meta.defocus_d

        meta = ptychogram.meta
        stack = ptychogram.stack()
        count = len(hypotheses)

        layers = []
        for hypothesis in hypotheses:
            amplitude = np.sqrt(np.maximum(shift_and_add_shifts(stack, hypothesis.shifts), 0.0)) / count
            layers.append(
                LayerEstimate(
                    wavefield=ComplexField(data=amplitude, pitch=meta.pitch, wavelength=meta.wavelength),
                    hypothesis=hypothesis,
                )
            )

        surface = np.sqrt(stack.mean(axis=0))
        mean_modulus = surface.mean()
        if mean_modulus == 0:
            raise NumericalException("Degenerate state: every measured frame is zero")
        cs = ComplexField(data=surface / mean_modulus, pitch=meta.pitch, wavelength=meta.wavelength)

        state = ReconState(cs_estimate=cs, layers=layers)
        state.initial_residual = self.misfit(state, ptychogram)
        self._notify_processors(ReconEvent.INITIALIZED, state, None)
        return state

    def forward_frame(self, state: ReconState, frame_index: int) -> FrameWavefields:
        """
        Sensor-plane components ψ_j = propagate(shift(W_j, s_ji) · CS, d) of one frame.
        """
        cs = state.cs_estimate
        components = []
        for layer in state.layers:
            dx, dy = layer.hypothesis.shifts[frame_index]
            exit_wave = shift_array(layer.wavefield.data, dx, dy) * cs.data
            components.append(cs.with_data(self._propagate(exit_wave, cs.pitch, cs.wavelength, 1)))
        return FrameWavefields.from_components(components)

    def misfit(self, state: ReconState, ptychogram: Ptychogram) -> float:
        """Normalized L1 data misfit Σ‖I_est − I_meas‖₁ / Σ‖I_meas‖₁ over all frames."""
        total = sum(float(frame.data.sum()) for frame in ptychogram.frames)
        error = 0.0
        for index, frame in enumerate(ptychogram.frames):
            error += float(np.abs(self.forward_frame(state, index).intensity.data - frame.data).sum())
        return error / total if total > 0 else error

    def _frame_increments(self, state: ReconState, frame_index: int, projected: FrameWavefields) -> FrameIncrements:
        cs = state.cs_estimate
        cs_peak = float(np.max(np.abs(cs.data) ** 2))
        if cs_peak == 0:
            raise NumericalException("Degenerate state: coded surface estimate is zero")

        shifted = []
        for index, layer in enumerate(state.layers):
            dx, dy = layer.hypothesis.shifts[frame_index]
            moved = shift_array(layer.wavefield.data, dx, dy)
            if not np.any(moved):
                raise NumericalException(f"Degenerate state: wavefield of layer {index} is zero")
            shifted.append(moved)
        layer_peak = max(float(np.max(np.abs(layer.wavefield.data) ** 2)) for layer in state.layers)

        layer_steps = []
        cs_step = np.zeros(cs.shape, dtype=np.complex128)
        for layer, moved, component in zip(state.layers, shifted, projected.components):
            dx, dy = layer.hypothesis.shifts[frame_index]
            exit_error = self._propagate(component.data, cs.pitch, cs.wavelength, -1) - moved * cs.data
            step = self.config.gamma * np.conj(cs.data) * exit_error / cs_peak
            layer_steps.append(shift_array(step, -dx, -dy))
            cs_step += np.conj(moved) * exit_error
        return layer_steps, self.config.beta * cs_step / layer_peak

    @staticmethod
    def _apply(state: ReconState, increments: FrameIncrements) -> None:
        layer_steps, cs_step = increments
        for layer, step in zip(state.layers, layer_steps):
            layer.wavefield = layer.wavefield.with_data(layer.wavefield.data + step)
        state.cs_estimate = state.cs_estimate.with_data(state.cs_estimate.data + cs_step)

    def update_frame(self, state: ReconState, frame_index: int, projected: FrameWavefields) -> ReconState:
        """
        Joint ePIE-style update of CS and every W_j from one projected frame.

        Both updates use the pre-update estimates on their right-hand sides.

        Raises:
            NumericalException: If CS or a layer wavefield is identically zero, or
                the update produces non-finite values.
        """
        increments = self._frame_increments(state, frame_index, projected)
        try:
            self._apply(state, increments)
        except ValidationError as exc:
            raise NumericalException(
                f"Non-finite values in state at epoch {state.epoch}, frame {frame_index}"
            ) from exc
        return state

    def _frame_order(self, epoch: int, count: int) -> np.ndarray:
        if self.config.frame_order == FrameOrder.SEQUENTIAL:
            return np.arange(count)
        return np.random.default_rng([self.config.shuffle_seed, epoch]).permutation(count)

    @contextmanager
    def _numerical_guard(self, epoch: int, frame_index: int) -> Iterator[None]:
        try:
            yield
        except ValidationError as exc:
            raise NumericalException(f"Non-finite values in state at epoch {epoch}, frame {frame_index}") from exc
        except FloatingPointError as exc:
            raise NumericalException(f"Floating point failure at epoch {epoch}, frame {frame_index}: {exc}") from exc

    def _normalize(self, state: ReconState) -> None:
        scale = float(np.mean(np.abs(state.cs_estimate.data)))
        if scale == 0:
            raise NumericalException(f"Degenerate state: coded surface vanished at epoch {state.epoch}")
        state.cs_estimate = state.cs_estimate.with_data(state.cs_estimate.data / scale)
        for layer in state.layers:
            layer.wavefield = layer.wavefield.with_data(layer.wavefield.data * scale)

    def _sequential_epoch(self, state: ReconState, ptychogram: Ptychogram, order: np.ndarray, epsilon: float) -> float:
        error = 0.0
        for index in order:
            frame = ptychogram.frames[index]
            with self._numerical_guard(state.epoch, int(index)):
                estimate = self.forward_frame(state, index)
                error += float(np.abs(estimate.intensity.data - frame.data).sum())
                self.update_frame(state, index, magnitude_project(estimate, frame, epsilon))
        return error

    def _batched_epoch(self, state: ReconState, ptychogram: Ptychogram, order: np.ndarray, epsilon: float) -> float:
        batch_size = self.config.batch_size
        error = 0.0

        def evaluate(index: int) -> tuple[float, FrameIncrements]:
            with self._numerical_guard(state.epoch, index):
                frame = ptychogram.frames[index]
                estimate = self.forward_frame(state, index)
                residual = float(np.abs(estimate.intensity.data - frame.data).sum())
                return residual, self._frame_increments(state, index, magnitude_project(estimate, frame, epsilon))

        with executor() as pool:
            for start in range(0, len(order), batch_size):
                batch = [int(index) for index in order[start : start + batch_size]]
                results = list(pool.map(evaluate, batch))
                layer_steps = [sum(steps[j] for _, (steps, _) in results) / len(batch) for j in range(len(state.layers))]
                cs_step = sum(cs for _, (_, cs) in results) / len(batch)
                error += sum(residual for residual, _ in results)
                with self._numerical_guard(state.epoch, batch[0]):
                    self._apply(state, (layer_steps, cs_step))
        return error

    def run(self, ptychogram: Ptychogram, hypotheses: Sequence[LayerHypothesis]) -> tuple[ReconState, ConvergenceReport]:
        """
        Iterate forward model, magnitude projection and joint update over all frames.

        Parameters:
            ptychogram (Ptychogram): Measured frames.
            hypotheses (Sequence[LayerHypothesis]): Layer scale factors and per-frame shifts.

        Returns:
            tuple[ReconState, ConvergenceReport]: Final estimates and the misfit per epoch.
        """
        state = self.initialize_state(ptychogram, hypotheses)
        peak = max(float(frame.data.max()) for frame in ptychogram.frames)
        epsilon = self.config.epsilon_div or 1e-6 * peak
        total = sum(float(frame.data.sum()) for frame in ptychogram.frames) or 1.0
        epoch_runner = self._sequential_epoch if self.config.batch_size is None else self._batched_epoch

        for epoch in range(self.config.iterations):
            order = self._frame_order(epoch, ptychogram.frame_count)
            error = epoch_runner(state, ptychogram, order, epsilon)
            self._normalize(state)
            state.epoch = epoch + 1
            state.residual_history = [*state.residual_history, error / total]
            logger.debug(f"Epoch {state.epoch}: residual {error / total:.6g}")
            self._notify_processors(ReconEvent.EPOCH_COMPLETED, state, None)

        report = ConvergenceReport(
            epochs_run=state.epoch,
            frames_per_epoch=ptychogram.frame_count,
            initial_residual=state.initial_residual,
            residual_history=list(state.residual_history),
        )
        logger.info(
            f"Reconstruction of {len(state.layers)} layers finished after {state.epoch} epochs, "
            f"residual {report.initial_residual:.4g} -> {report.final_residual:.4g}"
        )
        self._notify_processors(ReconEvent.FINISHED, state, report)
        return state, report


def run_reconstruction(
    ptychogram: Ptychogram,
    hypotheses: Sequence[LayerHypothesis],
    config: ReconConfig,
    processors: Sequence[ProcessorBase] = (),
) -> tuple[ReconState, ConvergenceReport]:
    controller = ReconstructionController(config)
    for processor in processors:
        controller.register_processor(processor)
    return controller.run(ptychogram, hypotheses)
