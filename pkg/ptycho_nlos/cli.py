import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from ptycho_nlos.config import RunConfig, config_digest, default_run_config, load_config
from ptycho_nlos.container import (
    read_container,
    read_hypotheses,
    read_state,
    save_field,
    save_field_images,
    save_image,
    write_container,
    write_csv,
    write_hypotheses,
    write_json,
    write_model,
    write_scale_scan,
    write_state,
)
from ptycho_nlos.depth import SegmentGrid, compose_all_in_focus, refocus_sweep, residual_contrast_curve
from ptycho_nlos.enums import AnalysisMode
from ptycho_nlos.exception import ConfigException, DataException, PtychoNLOSException
from ptycho_nlos.pipeline import crosstalk_scene_builder, detect_layers, ground_truth_hypotheses, run_recovery, simulate
from ptycho_nlos.processors.logging_processor import LoggingProcessor
from ptycho_nlos.recovery import recover_object

logger = logging.getLogger("ptycho_nlos")

LOG_NAME = "run.log"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _configure_logging(out_dir: Path, quiet: bool) -> list[logging.Handler]:
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING if quiet else logging.INFO)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    log_file = logging.FileHandler(out_dir / LOG_NAME, mode="w")
    log_file.setLevel(logging.DEBUG)
    log_file.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.setLevel(logging.DEBUG)
    logger.addHandler(console)
    logger.addHandler(log_file)
    return [console, log_file]


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else default_run_config()
    if args.seed_override is not None:
        config = config.model_copy(update={"seed": args.seed_override})
    return config


def _record(out_dir: Path, command: str, config: RunConfig) -> None:
    write_json({"command": command, "config_sha256": config_digest(config), "seed": config.seed}, out_dir / "run.json")
    write_model(config, out_dir / "config.json")


def cmd_simulate(args: argparse.Namespace) -> None:
    config = _load(args)
    out_dir: Path = args.out
    ptychogram, truth = simulate(config)
    write_container(ptychogram, out_dir / "container")

    truth_dir = out_dir / "ground_truth"
    truth_dir.mkdir(exist_ok=True)
    save_field(truth.coded_surface.profile, truth_dir / "cs.npy")
    for index, (obj, wavefield) in enumerate(zip(truth.objects, truth.wavefields)):
        save_field(obj, truth_dir / f"object_{index:02d}.npy")
        save_field(wavefield, truth_dir / f"wavefield_{index:02d}.npy")
    write_hypotheses(ground_truth_hypotheses(truth), truth_dir / "hypotheses.json")
    write_json({"depths": truth.depths, "alphas": truth.alphas}, truth_dir / "layers.json")
    _record(out_dir, "simulate", config)


def cmd_scan_scales(args: argparse.Namespace) -> None:
    config = _load(args)
    out_dir: Path = args.out
    ptychogram = read_container(args.container)
    scan, hypotheses = detect_layers(ptychogram, config.recovery)
    write_scale_scan(scan, out_dir / "scale_scan.csv")
    write_hypotheses(hypotheses, out_dir / "hypotheses.json")
    logger.info(f"Detected {len(hypotheses)} layers at alphas {[hypothesis.alpha for hypothesis in hypotheses]}")
    _record(out_dir, "scan-scales", config)


def cmd_reconstruct(args: argparse.Namespace) -> None:
    config = _load(args)
    out_dir: Path = args.out
    if args.epochs_override is not None:
        reconstruction = config.recovery.reconstruction.model_copy(update={"iterations": args.epochs_override})
        config = config.model_copy(
            update={"recovery": config.recovery.model_copy(update={"reconstruction": reconstruction})}
        )
    ptychogram = read_container(args.container)
    hypotheses = read_hypotheses(args.hypotheses)

    result = run_recovery(
        ptychogram,
        config.recovery,
        geometry=config.scene.geometry,
        hypotheses=hypotheses,
        processors=[LoggingProcessor()],
    )
    state = result.state
    write_state(state, out_dir / "state")
    rows = [(0, result.report.initial_residual)]
    rows += [(epoch, residual) for epoch, residual in enumerate(result.report.residual_history, start=1)]
    write_csv(out_dir / "residuals.csv", ["epoch", "residual"], rows)

    images = out_dir / "images"
    objects = out_dir / "objects"
    images.mkdir(exist_ok=True)
    objects.mkdir(exist_ok=True)
    save_field_images(state.cs_estimate, images / "cs")
    settings = config.recovery.reconstruction
    for index, layer in enumerate(state.layers):
        save_field_images(layer.wavefield, images / f"wavefield_{index:02d}")
        if layer.depth_estimate is None:
            logger.warning(f"Layer {index} at alpha {layer.hypothesis.alpha} has no depth estimate, object skipped")
            continue
        obj = recover_object(layer.wavefield, layer.depth_estimate, settings.tv_weight, settings.tv_inner_steps)
        save_field(obj, objects / f"object_{index:02d}.npy")
        save_field_images(obj, images / f"object_{index:02d}")
    _record(out_dir, "reconstruct", config)


def _sweep(args: argparse.Namespace, config: RunConfig, out_dir: Path) -> None:
    if args.state is None:
        raise ConfigException("Sweep analysis needs --state")
    state = read_state(args.state)
    analysis = config.analysis
    segments = SegmentGrid(rows=analysis.segment_rows, cols=analysis.segment_cols, overlap=analysis.overlap)
    for index, layer in enumerate(state.layers):
        sweep = refocus_sweep(layer.wavefield, segments, analysis.z_min, analysis.z_max, analysis.z_step)
        header = ["depth"] + [f"segment_{segment}" for segment in range(len(segments))]
        write_csv(
            out_dir / f"sweep_layer_{index:02d}.csv",
            header,
            ([depth, *column] for depth, column in zip(sweep.depths.tolist(), sweep.brenner.T.tolist())),
        )
        write_csv(
            out_dir / f"best_depth_layer_{index:02d}.csv",
            ["segment", "row", "col", "best_depth"],
            (
                (segment, segment // segments.cols, segment % segments.cols, "" if depth is None else depth)
                for segment, depth in enumerate(sweep.best_depth)
            ),
        )
        depth_map = compose_all_in_focus(layer.wavefield, sweep, segments)
        np.save(out_dir / f"depth_raster_layer_{index:02d}.npy", depth_map.depth_raster)
        np.save(out_dir / f"all_in_focus_layer_{index:02d}.npy", depth_map.all_in_focus.data)
        save_image(depth_map.depth_raster, out_dir / f"depth_raster_layer_{index:02d}.png")
        save_image(depth_map.all_in_focus.data, out_dir / f"all_in_focus_layer_{index:02d}.png")


def _crosstalk(config: RunConfig, out_dir: Path) -> None:
    report = residual_contrast_curve(crosstalk_scene_builder(config), config.analysis.delta_z, config.recovery)
    write_csv(
        out_dir / "crosstalk.csv",
        ["delta_z", "residual_contrast"],
        ((gap, "" if value is None else value) for gap, value in zip(report.delta_z, report.residual_contrast)),
    )
    write_model(report, out_dir / "crosstalk.json")
    if report.partial:
        logger.warning(f"Crosstalk report is partial: {report.failures}")


def cmd_analyze(args: argparse.Namespace) -> None:
    config = _load(args)
    out_dir: Path = args.out
    if args.mode == AnalysisMode.SWEEP:
        _sweep(args, config, out_dir)
    else:
        _crosstalk(config, out_dir)
    _record(out_dir, f"analyze {args.mode.value}", config)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (default: built-in 4-layer scene)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed-override", type=int, help="replace the configured seed")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors to stderr")

    parser = argparse.ArgumentParser(prog="ptycho-nlos", description="Ptychographic non-line-of-sight imaging toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate_parser = commands.add_parser("simulate", parents=[common], help="synthesize a ptychogram container")
    simulate_parser.set_defaults(handler=cmd_simulate)

    scan_parser = commands.add_parser("scan-scales", parents=[common], help="detect layers by scale-factor scan")
    scan_parser.add_argument("--container", type=Path, required=True)
    scan_parser.set_defaults(handler=cmd_scan_scales)

    reconstruct_parser = commands.add_parser("reconstruct", parents=[common], help="recover surface, wavefields and objects")
    reconstruct_parser.add_argument("--container", type=Path, required=True)
    reconstruct_parser.add_argument("--hypotheses", type=Path, required=True)
    reconstruct_parser.add_argument("--epochs-override", type=int, help="replace the configured epoch count")
    reconstruct_parser.set_defaults(handler=cmd_reconstruct)

    analyze_parser = commands.add_parser("analyze", parents=[common], help="depth sweep or crosstalk analysis")
    analyze_parser.add_argument("--state", type=Path)
    analyze_parser.add_argument("--mode", type=AnalysisMode, choices=list(AnalysisMode), default=AnalysisMode.SWEEP)
    analyze_parser.set_defaults(handler=cmd_analyze)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """
    Entry point of the `ptycho-nlos` command.

    Returns:
        int: 0 on success, the exception's exit code otherwise (2 config, 3 data, 4 numerical).
    """
    args = build_parser().parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    level = logger.level
    handlers = _configure_logging(args.out, args.quiet)
    try:
        args.handler(args)
    except PtychoNLOSException as exc:
        logger.error(str(exc))
        return exc.exit_code
    except ValidationError as exc:
        logger.error(str(exc))
        return DataException.exit_code
    finally:
        for handler in handlers:
            logger.removeHandler(handler)
            handler.close()
        logger.setLevel(level)
    return 0


if __name__ == "__main__":
    sys.exit(main())
