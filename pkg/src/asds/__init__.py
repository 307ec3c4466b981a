"""Image deblurring and super-resolution with adaptively selected PCA
sub-dictionaries, AR and non-local regularization."""

from .imaging import Degradation, PatchGrid, load_image, make_kernel, psnr, save_image, ssim
from .solver import SolverConfig, restore
from .training import LearnedModel, TrainConfig, load_model, save_model, train

__all__ = [
    "Degradation",
    "LearnedModel",
    "PatchGrid",
    "SolverConfig",
    "TrainConfig",
    "load_image",
    "load_model",
    "make_kernel",
    "psnr",
    "restore",
    "save_image",
    "save_model",
    "ssim",
    "train",
]

__version__ = "0.1.0"
