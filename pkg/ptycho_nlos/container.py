import csv
import json
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, ValidationError, model_validator

from ptycho_nlos.exception import DataException
from ptycho_nlos.field import ComplexField, IntensityFrame
from ptycho_nlos.registration import LayerHypothesis, ScaleScanResult
from ptycho_nlos.scene import AcquisitionMeta, NoiseModel, Ptychogram, ScanTrajectory
from ptycho_nlos.state import LayerEstimate, ReconState
from ptycho_nlos.types import RealArray

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
FRAMES_NAME = "frames.bin"
FRAME_DTYPE = np.dtype("<f4")


class PtychogramManifest(BaseModel):
    """Human-readable half of a ptychogram container."""

    model_config = ConfigDict(extra="forbid")

    version: int = FORMAT_VERSION
    frame_count: PositiveInt
    height: PositiveInt
    width: PositiveInt
    pitch: PositiveFloat
    wavelength: PositiveFloat
    defocus_d: PositiveFloat
    trajectory: list[tuple[float, float]]
    rows: PositiveInt | None = None
    cols: PositiveInt | None = None
    extent: PositiveFloat | None = None
    noise: NoiseModel = NoiseModel()
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self) -> "PtychogramManifest":
        if self.version != FORMAT_VERSION:
            raise ValueError(f"Unsupported container version {self.version}")
        if self.frame_count != len(self.trajectory):
            raise ValueError(f"frame_count {self.frame_count} differs from {len(self.trajectory)} trajectory entries")
        return self

    @property
    def frame_bytes(self) -> int:
        return self.height * self.width * FRAME_DTYPE.itemsize


class HypothesisFile(BaseModel):
    version: int = FORMAT_VERSION
    layers: list[LayerHypothesis]


class LayerRecord(BaseModel):
    alpha: float
    depth_estimate: float | None = None


class StateManifest(BaseModel):
    version: int = FORMAT_VERSION
    pitch: PositiveFloat
    wavelength: PositiveFloat
    epoch: int
    residual_history: list[float]
    initial_residual: float | None = None
    layers: list[LayerRecord]


class ImageScale(BaseModel):
    """Linear mapping used for an 8-bit export: value = min + (max - min) * pixel / 255."""

    minimum: float
    maximum: float


def write_model(model: BaseModel, path: Path) -> Path:
    path.write_text(model.model_dump_json(indent=2) + "\n")
    return path


def write_container(ptychogram: Ptychogram, directory: Path) -> Path:
    """
    Write the manifest and the frame blob of a ptychogram.

    Parameters:
        ptychogram (Ptychogram): Frames, trajectory and metadata.
        directory (Path): Target directory, created when missing.

    Returns:
        Path: The container directory.
    """
    directory.mkdir(parents=True, exist_ok=True)
    trajectory = ptychogram.trajectory
    meta = ptychogram.meta
    height, width = ptychogram.shape
    manifest = PtychogramManifest(
        frame_count=ptychogram.frame_count,
        height=height,
        width=width,
        pitch=meta.pitch,
        wavelength=meta.wavelength,
        defocus_d=meta.defocus_d,
        trajectory=[tuple(position) for position in trajectory.positions.tolist()],
        rows=trajectory.rows,
        cols=trajectory.cols,
        extent=trajectory.extent,
        noise=meta.noise,
        seed=meta.seed,
    )
    write_model(manifest, directory / MANIFEST_NAME)
    (directory / FRAMES_NAME).write_bytes(ptychogram.stack().astype(FRAME_DTYPE).tobytes())
    logger.info(f"Wrote {manifest.frame_count} frames of {height}x{width} to {directory}")
    return directory


def read_container(directory: Path) -> Ptychogram:
    """
    Load a container written by `write_container`.

    Raises:
        DataException: If a file is missing, the manifest is invalid or the blob
            size disagrees with the manifest (the message gives the byte offset).
    """
    manifest_path = directory / MANIFEST_NAME
    frames_path = directory / FRAMES_NAME
    for path in (manifest_path, frames_path):
        if not path.is_file():
            raise DataException(f"Container file {path} not found")
    try:
        manifest = PtychogramManifest.model_validate_json(manifest_path.read_text())
    except ValidationError as exc:
        raise DataException(f"Invalid manifest {manifest_path}: {exc}") from exc

    blob = frames_path.read_bytes()
    expected = manifest.frame_count * manifest.frame_bytes
    if len(blob) != expected:
        if len(blob) < expected:
            detail = (
                f"data ends at byte offset {len(blob)}, inside frame {len(blob) // manifest.frame_bytes}"
            )
        else:
            detail = f"unexpected trailing data from byte offset {expected}"
        raise DataException(
            f"{frames_path} holds {len(blob)} bytes but the manifest describes {manifest.frame_count} "
            f"frames of {manifest.height}x{manifest.width} float32 ({expected} bytes): {detail}"
        )

    stack = np.frombuffer(blob, dtype=FRAME_DTYPE).reshape(manifest.frame_count, manifest.height, manifest.width)
    try:
        return Ptychogram(
            frames=[IntensityFrame(data=frame, pitch=manifest.pitch) for frame in stack.astype(np.float64)],
            trajectory=ScanTrajectory(
                positions=manifest.trajectory, rows=manifest.rows, cols=manifest.cols, extent=manifest.extent
            ),
            meta=AcquisitionMeta(
                defocus_d=manifest.defocus_d,
                wavelength=manifest.wavelength,
                pitch=manifest.pitch,
                noise=manifest.noise,
                seed=manifest.seed,
            ),
        )
    except ValidationError as exc:
        raise DataException(f"Container {directory} holds invalid frames: {exc}") from exc


def write_hypotheses(hypotheses: Sequence[LayerHypothesis], path: Path) -> Path:
    return write_model(HypothesisFile(layers=list(hypotheses)), path)


def read_hypotheses(path: Path) -> list[LayerHypothesis]:
    if not path.is_file():
        raise DataException(f"Hypothesis file {path} not found")
    try:
        return HypothesisFile.model_validate_json(path.read_text()).layers
    except ValidationError as exc:
        raise DataException(f"Invalid hypothesis file {path}: {exc}") from exc


def save_field(field: ComplexField, path: Path) -> Path:
    np.save(path, field.data)
    return path


def load_field(path: Path, pitch: float, wavelength: float) -> ComplexField:
    if not path.is_file():
        raise DataException(f"Field dump {path} not found")
    return ComplexField(data=np.load(path), pitch=pitch, wavelength=wavelength)


def write_state(state: ReconState, directory: Path) -> Path:
    """Dump CS and every layer wavefield as .npy next to a JSON manifest with the hypotheses."""
    directory.mkdir(parents=True, exist_ok=True)
    save_field(state.cs_estimate, directory / "cs.npy")
    for index, layer in enumerate(state.layers):
        save_field(layer.wavefield, directory / f"layer_{index:02d}.npy")
    write_hypotheses([layer.hypothesis for layer in state.layers], directory / "hypotheses.json")
    manifest = StateManifest(
        pitch=state.cs_estimate.pitch,
        wavelength=state.cs_estimate.wavelength,
        epoch=state.epoch,
        residual_history=state.residual_history,
        initial_residual=state.initial_residual,
        layers=[LayerRecord(alpha=layer.hypothesis.alpha, depth_estimate=layer.depth_estimate) for layer in state.layers],
    )
    write_model(manifest, directory / "state.json")
    return directory


def read_state(directory: Path) -> ReconState:
    manifest_path = directory / "state.json"
    if not manifest_path.is_file():
        raise DataException(f"State manifest {manifest_path} not found")
    try:
        manifest = StateManifest.model_validate_json(manifest_path.read_text())
    except ValidationError as exc:
        raise DataException(f"Invalid state manifest {manifest_path}: {exc}") from exc
    hypotheses = read_hypotheses(directory / "hypotheses.json")
    layers = [
        LayerEstimate(
            wavefield=load_field(directory / f"layer_{index:02d}.npy", manifest.pitch, manifest.wavelength),
            hypothesis=hypothesis,
            depth_estimate=record.depth_estimate,
        )
        for index, (record, hypothesis) in enumerate(zip(manifest.layers, hypotheses))
    ]
    return ReconState(
        cs_estimate=load_field(directory / "cs.npy", manifest.pitch, manifest.wavelength),
        layers=layers,
        epoch=manifest.epoch,
        residual_history=manifest.residual_history,
        initial_residual=manifest.initial_residual,
    )


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_scale_scan(scan: ScaleScanResult, path: Path) -> Path:
    columns = [scan.alphas.tolist(), scan.brenner_curve.tolist()]
    header = ["alpha", "brenner"]
    if scan.moving_curve is not None:
        columns.append(scan.moving_curve.tolist())
        header.append("moving_brenner")
    return write_csv(path, header, zip(*columns))


def save_image(data: RealArray, path: Path) -> Path:
    """
    Export a real array as 8-bit grayscale PNG with a `.json` sidecar holding the mapping.
    """
    minimum, maximum = float(data.min()), float(data.max())
    span = maximum - minimum
    scaled = np.zeros(data.shape) if span == 0 else (data - minimum) / span * 255.0
    Image.fromarray(np.round(scaled).astype(np.uint8)).save(path, format="PNG")
    write_model(ImageScale(minimum=minimum, maximum=maximum), path.with_suffix(".json"))
    return path


def save_field_images(field: ComplexField, stem: Path) -> list[Path]:
    """Amplitude and phase PNGs of a complex field."""
    return [
        save_image(np.abs(field.data), stem.with_name(f"{stem.name}_amplitude.png")),
        save_image(np.angle(field.data), stem.with_name(f"{stem.name}_phase.png")),
    ]


def write_json(data: dict, path: Path) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path
