import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, NonNegativeInt, model_validator

from ptycho_nlos.field import ComplexField, IntensityFrame
from ptycho_nlos.registration import LayerHypothesis


class LayerEstimate(BaseModel):
    model_config = ConfigDict(validate_assignment=True)

    wavefield: ComplexField
    hypothesis: LayerHypothesis
    depth_estimate: float | None = None


class ReconState(BaseModel):
    """
    Current estimate of the coded surface and of every layer's wall wavefield.

    The layer list is fixed once the state is initialized.
    """

    model_config = ConfigDict(validate_assignment=True)

    cs_estimate: ComplexField
    layers: list[LayerEstimate]
    epoch: NonNegativeInt = 0
    residual_history: list[NonNegativeFloat] = []
    initial_residual: NonNegativeFloat | None = None

    @model_validator(mode="after")
    def _same_grid(self) -> "ReconState":
        for index, layer in enumerate(self.layers):
            if layer.wavefield.shape != self.cs_estimate.shape:
                raise ValueError(
                    f"Layer {index} wavefield shape {layer.wavefield.shape} differs from the "
                    f"coded surface shape {self.cs_estimate.shape}"
                )
        return self


class FrameWavefields(BaseModel):
    """Per-layer sensor-plane wavefields of one frame and their incoherent sum."""

    model_config = ConfigDict(frozen=True)

    components: list[ComplexField]
    intensity: IntensityFrame

    @model_validator(mode="after")
    def _intensity_matches(self) -> "FrameWavefields":
        total = sum(np.abs(component.data) ** 2 for component in self.components)
        if not np.allclose(total, self.intensity.data, rtol=1e-10, atol=1e-300):
            raise ValueError("Intensity is not the sum of the component intensities")
        return self

    @classmethod
    def from_components(cls, components: list[ComplexField]) -> "FrameWavefields":
        total = np.zeros(components[0].shape)
        for component in components:
            total += component.data.real**2 + component.data.imag**2
        return cls(components=components, intensity=IntensityFrame(data=total, pitch=components[0].pitch))


class ConvergenceReport(BaseModel):
    epochs_run: NonNegativeInt
    frames_per_epoch: NonNegativeInt
    initial_residual: NonNegativeFloat
    residual_history: list[NonNegativeFloat]

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else self.initial_residual
