"""Frequency-domain data augmentation.

An image's per-channel spectrum is taken to polar form and the configured
grids (amplitude, phase, or both) receive elementwise multiplicative noise
alpha ~ U(a, b) and additive noise beta ~ N(mu, sigma^2); sigma may instead be
derived from a signal-to-noise ratio of the target grid.  When both grids are
perturbed they get independent noise fields.  The perturbed spectrum is no
longer Hermitian-symmetric, so the real part of the inverse transform is
taken, and the result is clipped back to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .spectral import _fft2_stack, _ifft2_stack, from_polar, to_polar

_TARGETS = ("amplitude", "phase", "both", "none")


@dataclass(frozen=True)
class NoiseConfig:
    """Noise laws and application policy for one augmentation stream.

    ``snr_db`` and ``sigma`` are mutually exclusive ways to size the additive
    noise; the default scales it to 30 dB below the target grid's power.
    ``apply_probability`` is the chance a given image is perturbed at all.
    """

    target: str = "both"
    mult_low: float = 0.5
    mult_high: float = 1.5
    mu: float = 0.0
    sigma: float | None = None
    snr_db: float | None = 30.0
    apply_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.target not in _TARGETS:
            raise ValueError(f"noise target must be one of {_TARGETS}, got {self.target!r}")
        if self.mult_low > self.mult_high:
            raise ValueError("mult_low must not exceed mult_high")
        if self.sigma is not None and self.snr_db is not None:
            raise ValueError("sigma and snr_db are mutually exclusive")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")

    def disabled(self) -> "NoiseConfig":
        return replace(self, target="none")


def snr_to_sigma(signal: np.ndarray, snr_db: float) -> float:
    """Noise sigma that puts ``signal`` at ``snr_db`` dB over the noise power."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        raise ValueError("snr_to_sigma: empty signal")
    power = float(np.mean(signal * signal))
    return float(np.sqrt(power / 10.0 ** (snr_db / 10.0)))


def sample_noise_field(shape, cfg: NoiseConfig, rng: np.random.Generator,
                       signal: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Independent per-element draws: alpha uniform, beta normal.

    When the config sizes the additive law by SNR, the target grid must be
    passed as ``signal`` so sigma can be derived from its power.
    """
    alpha = rng.uniform(cfg.mult_low, cfg.mult_high, size=shape)
    if cfg.snr_db is not None:
        if signal is None:
            raise ValueError("sample_noise_field: snr_db config needs the target grid as signal")
        sigma = snr_to_sigma(signal, cfg.snr_db)
    else:
        sigma = cfg.sigma if cfg.sigma is not None else 0.0
    beta = rng.normal(cfg.mu, sigma, size=shape) if sigma > 0 or cfg.mu != 0 else np.zeros(shape)
    return alpha, beta


def _wrap_phase(phase: np.ndarray) -> np.ndarray:
    wrapped = np.mod(phase + np.pi, 2.0 * np.pi) - np.pi
    wrapped[wrapped == -np.pi] = np.pi
    return wrapped


def perturb(image: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment one C x H x W image in the frequency domain.

    Draw order per image: the apply decision, then (alpha, beta) for the
    amplitude grid if targeted, then (alpha, beta) for the phase grid if
    targeted; amplitudes are clamped at zero after the affine perturbation.
    """
    image = np.asarray(image)
    if cfg.target == "none":
        return image
    if rng.random() >= cfg.apply_probability:
        return image
    spectra = _fft2_stack(image)
    amplitude, phase = to_polar(spectra)
    if cfg.target in ("amplitude", "both"):
        alpha, beta = sample_noise_field(amplitude.shape, cfg, rng, signal=amplitude)
        amplitude = np.maximum(alpha * amplitude + beta, 0.0)
    if cfg.target in ("phase", "both"):
        alpha, beta = sample_noise_field(phase.shape, cfg, rng, signal=phase)
        phase = _wrap_phase(alpha * phase + beta)
    out = _ifft2_stack(from_polar(amplitude, phase))
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def pixel_noise(image: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Time-domain control: the same noise laws applied directly to pixels."""
    image = np.asarray(image)
    if cfg.target == "none":
        return image
    if rng.random() >= cfg.apply_probability:
        return image
    alpha, beta = sample_noise_field(image.shape, cfg, rng, signal=image)
    return np.clip(alpha * image + beta, 0.0, 1.0).astype(image.dtype, copy=False)
