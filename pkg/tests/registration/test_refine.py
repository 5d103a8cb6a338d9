import logging

import numpy as np
import pytest

from ptycho_nlos.exception import DataException
from ptycho_nlos.registration import LayerHypothesis, refine_shifts
from ptycho_nlos.settings import THREADS_ENV_VAR
from tests.scenes import PITCH, hypotheses_for, pixel_raster, ptychogram_from_stack, shifted_stack, texture


def _perturbed_scene(seed=1):
    trajectory = pixel_raster(5, 5, 4)
    nominal = trajectory.centered() / PITCH
    perturbation = np.random.default_rng(seed).uniform(-1.0, 1.0, nominal.shape)
    pattern = texture((64, 64), seed=seed, sigma=2.0) + 0.5
    stack = shifted_stack([pattern], [nominal + perturbation])
    return ptychogram_from_stack(stack, trajectory), nominal, perturbation


def test_refinement_recovers_perturbation():
    ptychogram, nominal, perturbation = _perturbed_scene()

    refined = refine_shifts(ptychogram, [LayerHypothesis(alpha=1.0, shifts=nominal)], passes=4)[0]

    np.testing.assert_allclose(refined.shifts - nominal, perturbation - perturbation.mean(axis=0), atol=0.1)
    assert len(refined.refinement_history) == 4
    assert refined.refinement_history[-1] < refined.refinement_history[0]
    assert refined.low_correlation_frames == 0


def test_refinement_keeps_centroid():
    ptychogram, nominal, _ = _perturbed_scene(seed=2)

    refined = refine_shifts(ptychogram, [LayerHypothesis(alpha=1.0, shifts=nominal)], passes=2)[0]

    np.testing.assert_allclose(refined.shifts.mean(axis=0), nominal.mean(axis=0), atol=1e-9)


def test_exact_shifts_stay_put():
    trajectory = pixel_raster(3, 3, 4)
    shifts = trajectory.centered() / PITCH
    stack = shifted_stack([texture((64, 64), seed=3) + 0.5], [shifts])

    refined = refine_shifts(ptychogram_from_stack(stack, trajectory), [LayerHypothesis(alpha=1.0, shifts=shifts)])[0]

    np.testing.assert_allclose(refined.shifts, shifts, atol=0.06)


def test_zero_passes_is_identity():
    ptychogram, nominal, _ = _perturbed_scene()
    hypothesis = LayerHypothesis(alpha=1.0, shifts=nominal)

    assert refine_shifts(ptychogram, [hypothesis], passes=0) == [hypothesis]


def test_shift_count_must_match_frames():
    ptychogram, nominal, _ = _perturbed_scene()

    with pytest.raises(DataException):
        refine_shifts(ptychogram, [LayerHypothesis(alpha=1.0, shifts=nominal[:3])])


def test_low_correlation_frames_keep_their_shift(mocker, caplog):
    ptychogram, nominal, _ = _perturbed_scene()
    mocker.patch("ptycho_nlos.registration._register", return_value=(1.5, 0.0, 0.01))

    with caplog.at_level(logging.WARNING, logger="ptycho_nlos.registration"):
        refined = refine_shifts(ptychogram, [LayerHypothesis(alpha=1.0, shifts=nominal)], passes=2)[0]

    np.testing.assert_array_equal(refined.shifts, nominal)
    assert refined.low_correlation_frames == 2 * ptychogram.frame_count
    assert refined.refinement_history == [0.0, 0.0]
    assert "correlation floor" in caplog.text


def test_corrections_are_clamped_and_centred(mocker, monkeypatch):
    monkeypatch.setenv(THREADS_ENV_VAR, "1")
    trajectory = pixel_raster(3, 3, 4)
    shifts = trajectory.centered() / PITCH
    ptychogram = ptychogram_from_stack(shifted_stack([texture((32, 32), seed=4)], [shifts]), trajectory)
    mocker.patch(
        "ptycho_nlos.registration._register",
        side_effect=[(5.0, 0.0, 1.0)] + [(0.0, 0.0, 1.0)] * 8,
    )

    refined = refine_shifts(ptychogram, [LayerHypothesis(alpha=1.0, shifts=shifts)], passes=1)[0]

    applied = refined.shifts - shifts
    np.testing.assert_allclose(applied[0], [2.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(applied[1:], [[-5.0 / 9, 0.0]] * 8, atol=1e-12)


def test_no_applied_correction_exceeds_the_clamp(mocker, monkeypatch):
    monkeypatch.setenv(THREADS_ENV_VAR, "1")
    trajectory = pixel_raster(3, 3, 4)
    shifts = trajectory.centered() / PITCH
    ptychogram = ptychogram_from_stack(shifted_stack([texture((32, 32), seed=6)], [shifts]), trajectory)
    wild = np.random.default_rng(6).uniform(-12.0, 12.0, (9, 2))
    mocker.patch(
        "ptycho_nlos.registration._register",
        side_effect=[(dx, dy, 1.0) for dx, dy in wild],
    )

    refined = refine_shifts(ptychogram, [LayerHypothesis(alpha=1.0, shifts=shifts)], passes=1)[0]

    assert np.abs(refined.shifts - shifts).max() <= 2.0 + 1e-12
    assert refined.refinement_history[0] <= 2.0 * np.sqrt(2.0) + 1e-12


def test_diverging_refinement_is_reported(mocker, monkeypatch, caplog):
    monkeypatch.setenv(THREADS_ENV_VAR, "1")
    trajectory = pixel_raster(2, 2, 4)
    shifts = trajectory.centered() / PITCH
    ptychogram = ptychogram_from_stack(shifted_stack([texture((32, 32), seed=5)], [shifts]), trajectory)
    small = [(0.1, 0.0, 1.0), (-0.1, 0.0, 1.0)] * 2
    large = [(1.0, 0.0, 1.0), (-1.0, 0.0, 1.0)] * 2
    mocker.patch("ptycho_nlos.registration._register", side_effect=small + large)

    with caplog.at_level(logging.WARNING, logger="ptycho_nlos.registration"):
        refined = refine_shifts(ptychogram, [LayerHypothesis(alpha=1.0, shifts=shifts)], passes=2)[0]

    assert refined.refinement_history == pytest.approx([0.1, 1.0])
    assert "not converging" in caplog.text


def test_two_overlapping_layers_are_refined_together():
    trajectory = pixel_raster(5, 5, 6)
    nominal = trajectory.centered() / PITCH
    rng = np.random.default_rng(7)
    tables = [alpha * nominal for alpha in (1.0, 0.5)]
    perturbations = [rng.uniform(-1.0, 1.0, nominal.shape) for _ in tables]
    patterns = [texture((96, 96), seed=seed, sigma=2.0) for seed in (8, 9)]
    stack = shifted_stack(patterns, [table + offset for table, offset in zip(tables, perturbations)])

    refined = refine_shifts(
        ptychogram_from_stack(stack, trajectory), hypotheses_for([1.0, 0.5], tables), passes=5
    )

    for hypothesis, table, offset in zip(refined, tables, perturbations):
        error = hypothesis.shifts - table - (offset - offset.mean(axis=0))
        assert np.sqrt(np.mean(np.sum(error**2, axis=1))) <= 0.5
