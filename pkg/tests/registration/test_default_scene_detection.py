import numpy as np
import pytest

from ptycho_nlos.config import default_run_config
from ptycho_nlos.pipeline import simulate
from ptycho_nlos.registration import LayerHypothesis, refine_shifts, scan_scale_factors

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def default_scene():
    return simulate(default_run_config())


def _perturbed(truth, seed=0):
    rng = np.random.default_rng(seed)
    offsets = [rng.uniform(-1.0, 1.0, shifts.shape) for shifts in truth.pixel_shifts]
    hypotheses = [
        LayerHypothesis(alpha=alpha, shifts=shifts + offset)
        for alpha, shifts, offset in zip(truth.alphas, truth.pixel_shifts, offsets)
    ]
    return hypotheses


def _centred_rms(refined, truth_shifts):
    error = refined - truth_shifts
    error -= error.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(error**2, axis=1))))


def test_scan_finds_all_four_layers(default_scene):
    ptychogram, truth = default_scene

    scan = scan_scale_factors(ptychogram)

    found = sorted(alpha for alpha, _ in scan.peaks)
    assert len(found) == 4
    assert found == pytest.approx(sorted(truth.alphas), abs=0.02)
    assert sorted(truth.alphas) == pytest.approx([0.242, 0.615, 0.769, 1.0], abs=1e-3)


def test_two_layer_refinement_from_a_pixel_of_error():
    config = default_run_config()
    scene = config.scene.model_copy(update={"layers": config.scene.layers[:2]})
    ptychogram, truth = simulate(config.model_copy(update={"scene": scene}))
    hypotheses = _perturbed(truth, seed=1)

    refined = refine_shifts(ptychogram, hypotheses, passes=5)

    for hypothesis, shifts in zip(refined, truth.pixel_shifts):
        assert _centred_rms(hypothesis.shifts, shifts) <= 0.5


def test_four_layer_refinement_from_a_pixel_of_error(default_scene):
    ptychogram, truth = default_scene
    hypotheses = _perturbed(truth, seed=2)

    refined = refine_shifts(ptychogram, hypotheses, passes=5)

    for hypothesis, shifts in zip(refined, truth.pixel_shifts):
        assert _centred_rms(hypothesis.shifts, shifts) <= 0.5
