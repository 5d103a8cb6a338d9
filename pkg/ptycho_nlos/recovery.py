import numpy as np
from skimage.registration import phase_cross_correlation
from skimage.restoration import denoise_tv_bregman

from ptycho_nlos.exception import DataException
from ptycho_nlos.field import ComplexField, propagate, shift_array
from ptycho_nlos.types import RealArray

OUTER_ITERATIONS = 5
BLEND = 0.5


def total_variation(data: RealArray) -> float:
    """Anisotropic total variation with non-periodic boundaries."""
    return float(np.abs(np.diff(data, axis=0)).sum() + np.abs(np.diff(data, axis=1)).sum())


def data_consistency_gradient(obj: ComplexField, wall: ComplexField, depth: float) -> ComplexField:
    """
    Gradient of ‖propagate(O, depth) − W‖₂², twice the Wirtinger derivative along conj(O).

    The directional derivative along a perturbation h is Re⟨gradient, h⟩.
    """
    residual = propagate(obj, depth).data - wall.data
    return obj.with_data(2.0 * propagate(obj.with_data(residual), -depth).data)


def recover_object(
    wavefield: ComplexField,
    depth: float,
    tv_weight: float = 0.0,
    tv_inner_steps: int = 10,
) -> ComplexField:
    """
    Object at `depth` behind the wall, from its wall-plane wavefield.

    Starts from the back-propagated field and alternates a blend towards the
    back-propagated modulus with anisotropic TV smoothing of the modulus. The
    phase of the back-propagation is kept.

    Parameters:
        wavefield (ComplexField): Recovered wall wavefield W_j.
        depth (float): Object depth in meters, positive.
        tv_weight (float): TV weight λ; 0 gives plain back-propagation.
        tv_inner_steps (int): Proximal iterations per outer step.

    Returns:
        ComplexField: The object estimate.
    """
    if depth <= 0:
        raise DataException(f"Object depth must be positive, got {depth}")
    back = propagate(wavefield, -depth)
    if tv_weight == 0:
        return back

    modulus = np.abs(back.data)
    scale = float(modulus.max())
    if scale == 0:
        return back
    reference = modulus / scale
    phase = np.exp(1j * np.angle(back.data))

    estimate = reference
    for _ in range(OUTER_ITERATIONS):
        blended = (1.0 - BLEND) * estimate + BLEND * reference
        estimate = denoise_tv_bregman(
            blended, weight=2.0 / tv_weight, max_num_iter=tv_inner_steps, isotropic=False
        )
    return back.with_data(np.clip(estimate, 0.0, None) * scale * phase)


def registered_correlation(estimate: RealArray, truth: RealArray, upsample_factor: int = 10) -> float:
    """
    Normalized cross-correlation after removing a global translation.

    Invariant to positive gain and offset of `estimate`.
    """
    if estimate.shape != truth.shape:
        raise DataException(f"Cannot compare shapes {estimate.shape} and {truth.shape}")
    shift = phase_cross_correlation(truth, estimate, upsample_factor=upsample_factor, normalization=None)[0]
    aligned = shift_array(estimate, float(shift[1]), float(shift[0]))
    a = aligned - aligned.mean()
    b = truth - truth.mean()
    norm = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / norm) if norm > 0 else 0.0
