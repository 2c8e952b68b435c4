"""Pixel-wise mixture of super-resolution experts, implemented on numpy."""

from .estimator import MixtureSR, check_image, check_images
from .experts import ScnConfig, ScnExpert, SrcnnConfig, SrcnnExpert, make_expert
from .imaging import PlanarImage, bicubic_resize, degrade, load_image, luminance, save_image
from .metrics import psnr, ssim
from .mixture import MixtureNetwork, WeightModule, WeightModuleConfig, make_mixture, max_label_map
from .model_store import ModelFormatError, load_model, save_model
from .pipeline import super_resolve, upscale_luminance
from .training import TrainConfig, train, validate

__version__ = "0.1.0"

__all__ = [
    "MixtureNetwork",
    "MixtureSR",
    "ModelFormatError",
    "PlanarImage",
    "ScnConfig",
    "ScnExpert",
    "SrcnnConfig",
    "SrcnnExpert",
    "TrainConfig",
    "WeightModule",
    "WeightModuleConfig",
    "bicubic_resize",
    "check_image",
    "check_images",
    "degrade",
    "load_image",
    "load_model",
    "luminance",
    "make_expert",
    "make_mixture",
    "max_label_map",
    "psnr",
    "save_image",
    "save_model",
    "ssim",
    "super_resolve",
    "train",
    "upscale_luminance",
    "validate",
]
