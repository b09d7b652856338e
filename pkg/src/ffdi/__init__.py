"""Frequency-domain feature disentanglement and interaction, desk scale.

A small, framework-free stack: a numpy autodiff core, centered 2-D spectra
with square low-pass masks, frequency-domain data augmentation, the
disentangle/interact network with its joint objective, a synthetic
multi-domain shape benchmark, and a leave-one-domain-out training harness
with a CLI.
"""

from .data import (
    DataError,
    DomainDataset,
    DomainSpec,
    augment_standard,
    build_dataset,
    load_dataset,
    read_image,
    render_sample,
    save_dataset,
    write_image,
)
from .fdag import NoiseConfig, perturb, sample_noise_field, snr_to_sigma
from .harness import (
    ConfigError,
    RunReport,
    TrainConfig,
    a_distance,
    ablation_suite,
    evaluate,
    export_features,
    sweep_r,
    train_lodo,
)
from .model import FfdiConfig, FfdiModel, ffdi_losses
from .spectral import decompose, fft2d, from_polar, ifft2d, lowpass_mask, to_polar
from .tensor import Sgd, Tensor, backward, no_grad, sgd_step

__version__ = "0.1.0"

__all__ = [
    "DataError", "DomainDataset", "DomainSpec", "augment_standard", "build_dataset",
    "load_dataset", "read_image", "render_sample", "save_dataset", "write_image",
    "NoiseConfig", "perturb", "sample_noise_field", "snr_to_sigma",
    "ConfigError", "RunReport", "TrainConfig", "a_distance", "ablation_suite",
    "evaluate", "export_features", "sweep_r", "train_lodo",
    "FfdiConfig", "FfdiModel", "ffdi_losses",
    "decompose", "fft2d", "from_polar", "ifft2d", "lowpass_mask", "to_polar",
    "Sgd", "Tensor", "backward", "no_grad", "sgd_step",
    "__version__",
]
