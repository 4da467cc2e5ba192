"""Two-stage document enhancement: a coarse predictor plus a residual diffusion refiner."""
from .inference import enhance, make_tile_plan, refine_external
from .metrics import f_measure, psnr, pseudo_f_measure, ssim
from .model import ModelBundle, UNetConfig, default_configs
from .schedule import linear_schedule, make_step_plan
from .trainer import TrainConfig, load_checkpoint, new_training_state, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ModelBundle",
    "TrainConfig",
    "UNetConfig",
    "default_configs",
    "enhance",
    "f_measure",
    "linear_schedule",
    "load_checkpoint",
    "make_step_plan",
    "make_tile_plan",
    "new_training_state",
    "pseudo_f_measure",
    "psnr",
    "refine_external",
    "save_checkpoint",
    "ssim",
    "train",
]
