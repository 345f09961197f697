"""Denoising and bias-field correction applied ahead of mode scaling."""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage, signal

from flairnorm.errors import EmptyMaskError, NonPositiveIntensityError, TooSmallError
from flairnorm.volume import Mask, Volume, check_dims

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_MM = 60.0


def median_filter_3x3(volume: Volume) -> Volume:
    """3x3 in-plane median per axial slice, edge-replicated borders."""
    nx, ny, _ = volume.dims
    if nx < 3 or ny < 3:
        raise TooSmallError(f"in-plane size {nx}x{ny} is smaller than 3x3")
    out = ndimage.median_filter(volume.data, size=(3, 3, 1), mode="nearest")
    return volume.with_data(out)


def _gaussian_kernel(sigma: float, n: int) -> np.ndarray:
    # outputs only see inputs within n-1 voxels, so longer kernels add nothing
    radius = int(min(np.ceil(4.0 * sigma), n - 1))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_lowpass(arr: np.ndarray, sigma_vox) -> np.ndarray:
    """Separable Gaussian with zero padding outside the grid."""
    out = np.asarray(arr, dtype=np.float64)
    for axis, sigma in enumerate(sigma_vox):
        n = out.shape[axis]
        if n == 1 or sigma <= 0:
            continue
        k = _gaussian_kernel(sigma, n)
        shape = [1] * out.ndim
        shape[axis] = k.size
        out = signal.fftconvolve(out, k.reshape(shape), mode="same", axes=axis)
    return out


def estimate_log_bias(volume: Volume, mask: Mask, sigma_mm: float = DEFAULT_SIGMA_MM) -> np.ndarray:
    """Smooth log-intensity field over the mask (normalized convolution).

    Returns an array that is only meaningful inside the mask.
    """
    check_dims(volume, mask)
    if sigma_mm <= 0:
        raise ValueError("sigma_mm must be positive")
    m = mask.data
    if not m.any():
        raise EmptyMaskError("bias correction needs a non-empty mask")
    inside = volume.data[m]
    if np.any(inside <= 0):
        raise NonPositiveIntensityError("in-mask intensities must be > 0 for log-domain correction")
    log_img = np.zeros(volume.dims)
    log_img[m] = np.log(inside)
    sigma_vox = [sigma_mm / s for s in volume.spacing]
    weight = gaussian_lowpass(m.astype(np.float64), sigma_vox)
    num = gaussian_lowpass(log_img, sigma_vox)
    field = np.zeros(volume.dims)
    field[m] = num[m] / weight[m]
    return field


def bias_correct(volume: Volume, mask: Mask, sigma_mm: float = DEFAULT_SIGMA_MM) -> Volume:
    """Divide out a lowpass multiplicative bias field inside the mask.

    The field is re-centred on its in-mask mean, so the in-mask geometric
    mean is unchanged. Voxels outside the mask are returned untouched.
    """
    field = estimate_log_bias(volume, mask, sigma_mm)
    m = mask.data
    f = field[m]
    out = np.array(volume.data)
    out[m] = np.exp(np.log(volume.data[m]) - f + f.mean())
    logger.debug("bias field log-range %.4g..%.4g", f.min(), f.max())
    return volume.with_data(out)
