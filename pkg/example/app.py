import logging
from pathlib import Path

import numpy as np

from ptycho_nlos.config import load_config
from ptycho_nlos.controller import ReconstructionController
from ptycho_nlos.pipeline import detect_layers, simulate
from ptycho_nlos.processors.logging_processor import LoggingProcessor
from ptycho_nlos.recovery import recover_object, registered_correlation
from ptycho_nlos.scene import depth_from_scale

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

config = load_config(Path(__file__).with_name("scene.json"))
ptychogram, truth = simulate(config)

scan, hypotheses = detect_layers(ptychogram, config.recovery)
print(f"Brenner peaks at {[round(alpha, 3) for alpha, _ in scan.peaks]}, true alphas {truth.alphas}")

controller = ReconstructionController(config.recovery.reconstruction)
controller.register_processor(LoggingProcessor())
with controller.set_context({"scene": "example", "layers": len(hypotheses)}):
    state, report = controller.run(ptychogram, hypotheses)

for layer in state.layers:
    depth = depth_from_scale(layer.hypothesis.alpha, config.scene.geometry)
    if depth is None:
        continue
    obj = recover_object(layer.wavefield, depth, config.recovery.reconstruction.tv_weight)
    nearest = int(np.argmin([abs(alpha - layer.hypothesis.alpha) for alpha in truth.alphas]))
    score = registered_correlation(np.abs(obj.data), np.abs(truth.objects[nearest].data))
    print(f"alpha {layer.hypothesis.alpha:.3f} -> depth {depth:.3f} m, correlation with object {nearest}: {score:.3f}")
