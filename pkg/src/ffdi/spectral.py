"""2-D spectra, centered low-pass masks, and low/high-frequency image splits.

Convention used throughout: a spectrum is a complex (H, W) grid stored
center-shifted, i.e. the DC bin sits at (H // 2, W // 2).  All transforms are
computed in double precision whatever the image dtype; spatial results are
cast back to the input dtype.
"""

from __future__ import annotations

import numpy as np


def fft2d(channel: np.ndarray) -> np.ndarray:
    """Forward 2-D DFT of one real channel, returned center-shifted."""
    channel = np.asarray(channel)
    if channel.ndim != 2:
        raise ValueError(f"fft2d expects an HxW grid, got shape {channel.shape}")
    return np.fft.fftshift(np.fft.fft2(channel.astype(np.float64)))


def ifft2d(spectrum: np.ndarray, return_residue: bool = False):
    """Inverse of ``fft2d``: real part of the inverse transform.

    With ``return_residue=True`` also returns max |imaginary part|, the
    diagnostic for how far the spectrum is from Hermitian symmetry.  Spectra
    perturbed independently in amplitude/phase are expected to carry residue;
    untouched round trips are not.
    """
    full = np.fft.ifft2(np.fft.ifftshift(np.asarray(spectrum)))
    if return_residue:
        return full.real, float(np.abs(full.imag).max(initial=0.0))
    return full.real


def _fft2_stack(channels: np.ndarray) -> np.ndarray:
    """Shifted forward DFT over the trailing two axes of a (..., H, W) stack."""
    spec = np.fft.fft2(np.asarray(channels, dtype=np.float64), axes=(-2, -1))
    return np.fft.fftshift(spec, axes=(-2, -1))


def _ifft2_stack(spectra: np.ndarray) -> np.ndarray:
    spec = np.fft.ifftshift(np.asarray(spectra), axes=(-2, -1))
    return np.fft.ifft2(spec, axes=(-2, -1)).real


def lowpass_mask(height: int, width: int, r: int) -> np.ndarray:
    """Square center mask: ones on rows [cx-r, cx+r] x cols [cy-r, cy+r].

    The interval is inclusive on both ends and clamped to the grid, so the
    number of ones is min(2r+1, H) * min(2r+1, W).  The box is square by
    construction, not a disc.
    """
    if r < 0:
        raise ValueError("lowpass_mask: r must be non-negative")
    cx, cy = height // 2, width // 2
    mask = np.zeros((height, width))
    mask[max(0, cx - r) : min(height - 1, cx + r) + 1,
         max(0, cy - r) : min(width - 1, cy + r) + 1] = 1.0
    return mask


def to_polar(spectrum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Modulus and principal-value argument; a zero bin gets phase 0."""
    spectrum = np.asarray(spectrum)
    return np.abs(spectrum), np.angle(spectrum)


def from_polar(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return amplitude * np.exp(1j * phase)


def decompose(image: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Split an image into its low-pass part and the exact complement.

    Channels are transformed independently; the low-pass image is the inverse
    transform of the center-masked spectrum and the high-pass image is the
    literal pixel difference image - low, so the two always sum back to the
    input.  Low-pass values may leave [0, 1]; they are regression targets, not
    display images, and are not clipped.
    """
    image = np.asarray(image)
    lfi, hfi = decompose_batch(image[None], r)
    return lfi[0], hfi[0]


def decompose_batch(images: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``decompose`` over any leading axes of (..., H, W)."""
    images = np.asarray(images)
    h, w = images.shape[-2:]
    mask = lowpass_mask(h, w, r)
    lfi = _ifft2_stack(_fft2_stack(images) * mask).astype(images.dtype, copy=False)
    return lfi, images - lfi
