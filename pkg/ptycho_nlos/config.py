import hashlib
import json
from pathlib import Path

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    model_validator,
)

from ptycho_nlos.enums import FrameOrder, TargetKind
from ptycho_nlos.exception import ConfigException
from ptycho_nlos.scene import DEFAULT_WAVELENGTH, NoiseModel, ShiftGeometry
from ptycho_nlos.types import ConfigType, GridShape


class ReconConfig(BaseModel):
    """
    Parameters of the mixed-state ptychographic reconstruction.

    `epsilon_div` defaults to 1e-6 of the brightest measured sample and
    `defocus_d` to the ptychogram's own defocus distance.
    """

    model_config = ConfigDict(extra="forbid")

    iterations: NonNegativeInt = 60
    gamma: float = Field(1.0, ge=0.0, le=2.0)
    beta: float = Field(1.0, ge=0.0, le=2.0)
    epsilon_div: PositiveFloat | None = None
    tv_weight: NonNegativeFloat = 1e-3
    tv_inner_steps: PositiveInt = 10
    frame_order: FrameOrder = FrameOrder.SHUFFLED
    shuffle_seed: NonNegativeInt = 0
    batch_size: PositiveInt | None = None
    defocus_d: NonNegativeFloat | None = None


class TargetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: TargetKind
    shape: GridShape = (128, 128)
    linewidths: list[PositiveFloat] = []
    text: str = ""
    font_size: PositiveInt = 48
    path: Path | None = None

    @model_validator(mode="after")
    def _image_exists(self) -> "TargetConfig":
        if self.kind == TargetKind.IMAGE_FILE and (self.path is None or not self.path.is_file()):
            raise ValueError(f"Target image {self.path} does not exist")
        return self


class LayerConfig(BaseModel):
    """A hidden object; with `depth_end` set it is tilted and split into `strips` layers."""

    model_config = ConfigDict(extra="forbid")

    target: TargetConfig
    depth: PositiveFloat
    offset: tuple[float, float] = (0.0, 0.0)
    depth_end: PositiveFloat | None = None
    strips: PositiveInt = 1


class CodedSurfaceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: NonNegativeInt | None = None
    correlation_length: PositiveFloat = 64e-6
    amp_range: tuple[PositiveFloat, PositiveFloat] = (0.5, 1.0)
    phase_range: NonNegativeFloat = 6.283185307179586


class SceneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: list[LayerConfig] = Field(min_length=1)
    coded_surface: CodedSurfaceConfig = CodedSurfaceConfig()
    geometry: ShiftGeometry = ShiftGeometry()


class AcquisitionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: GridShape = (256, 256)
    pitch: PositiveFloat = 32e-6
    wavelength: PositiveFloat = DEFAULT_WAVELENGTH
    defocus_d: PositiveFloat = 0.75e-3
    rows: PositiveInt = 11
    cols: PositiveInt = 11
    extent: PositiveFloat = 3.5e-3
    noise: NoiseModel = NoiseModel()


class RecoveryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha_range: tuple[float, float] = (0.0, 1.2)
    alpha_step: PositiveFloat = 0.02
    min_prominence_fraction: float = Field(0.15, ge=0.0, le=1.0)
    refine_passes: NonNegativeInt = 3
    use_ground_truth_shifts: bool = False
    reconstruction: ReconConfig = ReconConfig()


class AnalysisConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    z_min: PositiveFloat = 0.44
    z_max: PositiveFloat = 0.48
    z_step: PositiveFloat = 1e-3
    segment_rows: PositiveInt = 3
    segment_cols: PositiveInt = 6
    overlap: float = Field(0.2, ge=0.0, lt=0.5)
    delta_z: list[PositiveFloat] = [2e-3, 22e-3, 42e-3, 52e-3]
    z0: PositiveFloat = 0.4

    @model_validator(mode="after")
    def _ordered_range(self) -> "AnalysisConfig":
        if self.z_max < self.z_min:
            raise ValueError(f"z_max {self.z_max} is below z_min {self.z_min}")
        return self


class RunConfig(BaseModel):
    """Complete description of a simulate / recover / analyze run."""

    model_config = ConfigDict(extra="forbid")

    scene: SceneConfig
    acquisition: AcquisitionConfig = AcquisitionConfig()
    recovery: RecoveryConfig = RecoveryConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    seed: NonNegativeInt = 0

    @property
    def surface_seed(self) -> int:
        seed = self.scene.coded_surface.seed
        return self.seed if seed is None else seed


def _describe(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "; ".join(lines)


def parse_config(model: type[ConfigType], data: dict) -> ConfigType:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigException(f"Invalid {model.__name__}: {_describe(exc)}") from exc


def load_config(path: Path | str) -> RunConfig:
    """
    Read and validate a JSON run configuration.

    Raises:
        ConfigException: If the file is missing, is not JSON or fails validation.
            The message names every offending field.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigException(f"Configuration file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigException(f"Configuration file {path} is not valid JSON: {exc}") from exc
    return parse_config(RunConfig, data)


def config_digest(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def default_run_config() -> RunConfig:
    """
    Four targets at 0.4, 0.52, 0.65 and 1.65 m behind an 11 x 11 scan.

    The 8.2 mm wall patch keeps the full band at 0.4 m; the far bars are coarse
    enough for the narrower band at 1.65 m.
    """
    return RunConfig(
        scene=SceneConfig(
            layers=[
                LayerConfig(
                    target=TargetConfig(kind=TargetKind.USAF_BARS, linewidths=[256e-6, 192e-6, 128e-6]),
                    depth=0.4,
                ),
                LayerConfig(target=TargetConfig(kind=TargetKind.TEXT, text="P", font_size=72), depth=0.52),
                LayerConfig(target=TargetConfig(kind=TargetKind.TEXT, text="N", font_size=72), depth=0.65),
                LayerConfig(
                    target=TargetConfig(kind=TargetKind.USAF_BARS, linewidths=[320e-6, 256e-6]),
                    depth=1.65,
                ),
            ]
        )
    )
