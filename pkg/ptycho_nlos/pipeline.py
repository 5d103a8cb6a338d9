import logging
from collections.abc import Callable, Sequence

from pydantic import BaseModel, ConfigDict

from ptycho_nlos.config import AcquisitionConfig, LayerConfig, RecoveryConfig, RunConfig
from ptycho_nlos.controller import run_reconstruction
from ptycho_nlos.exception import ConfigException, DataException
from ptycho_nlos.processors.base import ProcessorBase
from ptycho_nlos.registration import (
    LayerHypothesis,
    ScaleScanResult,
    initial_hypotheses,
    refine_shifts,
    scan_scale_factors,
)
from ptycho_nlos.scene import (
    AcquisitionMeta,
    CodedSurface,
    GroundTruth,
    ObjectLayer,
    Ptychogram,
    ScanTrajectory,
    ShiftGeometry,
    TargetParams,
    depth_from_scale,
    make_test_target,
    simulate_ptychogram,
    split_tilted_object,
    synthesize_coded_surface,
)
from ptycho_nlos.state import ConvergenceReport, ReconState

logger = logging.getLogger(__name__)


class SceneSpec(BaseModel):
    """Everything `simulate_ptychogram` needs."""

    model_config = ConfigDict(frozen=True)

    layers: list[ObjectLayer]
    coded_surface: CodedSurface
    trajectory: ScanTrajectory
    meta: AcquisitionMeta
    geometry: ShiftGeometry


class RecoveryResult(BaseModel):
    state: ReconState
    report: ConvergenceReport
    hypotheses: list[LayerHypothesis]
    scan: ScaleScanResult | None = None


def build_layers(layer_configs: Sequence[LayerConfig], acquisition: AcquisitionConfig) -> list[ObjectLayer]:
    layers = []
    for layer_config in layer_configs:
        target = layer_config.target
        params = TargetParams(
            shape=target.shape,
            pitch=acquisition.pitch,
            wavelength=acquisition.wavelength,
            linewidths=target.linewidths,
            text=target.text,
            font_size=target.font_size,
            path=target.path,
        )
        reflectance = make_test_target(target.kind, params)
        if layer_config.depth_end is not None:
            layers.extend(
                split_tilted_object(
                    reflectance, layer_config.depth, layer_config.depth_end, layer_config.strips, layer_config.offset
                )
            )
        else:
            layers.append(ObjectLayer(reflectance=reflectance, depth=layer_config.depth, lateral_offset=layer_config.offset))
    return layers


def _acquisition(config: RunConfig) -> tuple[CodedSurface, ScanTrajectory, AcquisitionMeta]:
    acquisition = config.acquisition
    surface = config.scene.coded_surface
    coded_surface = synthesize_coded_surface(
        seed=config.surface_seed,
        grid=acquisition.grid,
        pitch=acquisition.pitch,
        correlation_length=surface.correlation_length,
        amp_range=surface.amp_range,
        phase_range=surface.phase_range,
        wavelength=acquisition.wavelength,
    )
    trajectory = ScanTrajectory.raster(acquisition.rows, acquisition.cols, acquisition.extent)
    meta = AcquisitionMeta(
        defocus_d=acquisition.defocus_d,
        wavelength=acquisition.wavelength,
        pitch=acquisition.pitch,
        noise=acquisition.noise,
        seed=config.seed,
    )
    return coded_surface, trajectory, meta


def build_scene(config: RunConfig) -> SceneSpec:
    coded_surface, trajectory, meta = _acquisition(config)
    return SceneSpec(
        layers=build_layers(config.scene.layers, config.acquisition),
        coded_surface=coded_surface,
        trajectory=trajectory,
        meta=meta,
        geometry=config.scene.geometry,
    )


def simulate_scene(scene: SceneSpec) -> tuple[Ptychogram, GroundTruth]:
    return simulate_ptychogram(scene.layers, scene.coded_surface, scene.trajectory, scene.meta, scene.geometry)


def simulate(config: RunConfig) -> tuple[Ptychogram, GroundTruth]:
    """Build the configured scene and synthesize its ptychogram."""
    return simulate_scene(build_scene(config))


def detect_layers(ptychogram: Ptychogram, recovery: RecoveryConfig) -> tuple[ScaleScanResult, list[LayerHypothesis]]:
    """
    Blind layer detection: scale-factor scan, then shift refinement.

    Returns:
        tuple[ScaleScanResult, list[LayerHypothesis]]: The scan and refined hypotheses.
    """
    scan = scan_scale_factors(
        ptychogram,
        alpha_range=recovery.alpha_range,
        alpha_step=recovery.alpha_step,
        min_prominence_fraction=recovery.min_prominence_fraction,
    )
    hypotheses = refine_shifts(ptychogram, initial_hypotheses(scan, ptychogram), passes=recovery.refine_passes)
    return scan, hypotheses


def ground_truth_hypotheses(truth: GroundTruth) -> list[LayerHypothesis]:
    return [LayerHypothesis(alpha=alpha, shifts=shifts) for alpha, shifts in zip(truth.alphas, truth.pixel_shifts)]


def run_recovery(
    ptychogram: Ptychogram,
    recovery: RecoveryConfig,
    geometry: ShiftGeometry | None = None,
    truth: GroundTruth | None = None,
    hypotheses: list[LayerHypothesis] | None = None,
    processors: Sequence[ProcessorBase] = (),
) -> RecoveryResult:
    """
    Detect layers (unless hypotheses are given) and reconstruct.

    Parameters:
        ptychogram (Ptychogram): Measured frames.
        recovery (RecoveryConfig): Scan, refinement and reconstruction settings.
        geometry (ShiftGeometry | None): Shift law used to label layers with depths.
        truth (GroundTruth | None): Needed when `use_ground_truth_shifts` is set.
        hypotheses (list[LayerHypothesis] | None): Skip detection and use these.
        processors (Sequence[ProcessorBase]): Observers registered on the controller.

    Returns:
        RecoveryResult: Final state, convergence report and the hypotheses used.
    """
    scan = None
    if hypotheses is None:
        if recovery.use_ground_truth_shifts:
            if truth is None:
                raise ConfigException("Ground-truth shifts requested but no ground truth is available")
            hypotheses = ground_truth_hypotheses(truth)
        else:
            scan, hypotheses = detect_layers(ptychogram, recovery)
    if not hypotheses:
        raise DataException("No layer detected in the scale scan")

    state, report = run_reconstruction(ptychogram, hypotheses, recovery.reconstruction, processors)
    if geometry is not None:
        for layer in state.layers:
            layer.depth_estimate = depth_from_scale(layer.hypothesis.alpha, geometry)
    return RecoveryResult(state=state, report=report, hypotheses=hypotheses, scan=scan)


def crosstalk_scene_builder(config: RunConfig) -> Callable[[float], SceneSpec]:
    """
    Two-layer scenes for the crosstalk protocol.

    The first two configured layers are used: the first at the standoff z0, the
    second at z0 + Δz, each with its configured lateral offset.
    """
    if len(config.scene.layers) < 2:
        raise ConfigException("Crosstalk analysis needs at least two configured layers")
    first, second = build_layers(
        [layer.model_copy(update={"depth_end": None}) for layer in config.scene.layers[:2]], config.acquisition
    )
    coded_surface, trajectory, meta = _acquisition(config)
    standoff = config.analysis.z0

    def build(delta_z: float) -> SceneSpec:
        return SceneSpec(
            layers=[
                first.model_copy(update={"depth": standoff}),
                second.model_copy(update={"depth": standoff + delta_z}),
            ],
            coded_surface=coded_surface,
            trajectory=trajectory,
            meta=meta,
            geometry=config.scene.geometry,
        )

    return build
