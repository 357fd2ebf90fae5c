"""Centered 2-D Fourier transforms for H x W x C images.

Forward transforms are unnormalized and the inverse carries the 1/(H*W)
factor. Spectra are stored shifted so the zero-frequency bin sits at
``(H // 2, W // 2)``.
"""

import numpy as np

_AXES = (0, 1)


def _check_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {x.shape}")
    if x.shape[0] < 4 or x.shape[1] < 4:
        raise ValueError(f"image must be at least 4 x 4, got {x.shape[:2]}")
    return x


def fft2(image):
    """Per-channel centered spectrum of a real image (complex128, H x W x C)."""
    x = _check_image(image)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return np.fft.fftshift(np.fft.fft2(x, axes=_AXES), axes=_AXES)


def ifft2(spec, return_residual=False):
    """Inverse of :func:`fft2`; keeps the real part.

    With ``return_residual`` the max absolute imaginary part that was
    discarded is returned as well.
    """
    spec = np.asarray(spec)
    if spec.ndim != 3:
        raise ValueError(f"expected an H x W x C spectrum, got shape {spec.shape}")
    z = np.fft.ifft2(np.fft.ifftshift(spec, axes=_AXES), axes=_AXES)
    out = np.ascontiguousarray(z.real)
    if return_residual:
        return out, float(np.max(np.abs(z.imag))) if z.size else 0.0
    return out


def split_mag_phase(spec):
    spec = np.asarray(spec)
    mag = np.abs(spec)
    # np.arctan2(0, 0) is already 0; zero bins therefore get phase 0
    phase = np.arctan2(spec.imag, spec.real)
    return mag, phase


def combine_mag_phase(mag, phase):
    return mag * np.exp(1j * phase)


def dc_index(h, w):
    return h // 2, w // 2
