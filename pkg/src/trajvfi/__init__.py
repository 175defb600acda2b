"""Frame interpolation with consistent bilateral motion, trajectory tokens and joint window attention."""
from .errors import InvalidArgument, InvalidData, NotFound, NumericFailure, PreconditionFailed
from .flow import approximate_bilateral, backward_warp, build_trajectories, inconsistency_map, trajectory_index
from .model import Interpolator, ModelConfig, interpolate, load_checkpoint, save_checkpoint
from .tokens import dynamic_local_conv
from .attention import joint_window_attention
from .losses import census_loss, charbonnier, consistency_losses, reconstruction_loss
from .metrics import psnr, ssim

__all__ = [
    "InvalidArgument", "InvalidData", "NotFound", "NumericFailure", "PreconditionFailed",
    "approximate_bilateral", "backward_warp", "build_trajectories", "inconsistency_map", "trajectory_index",
    "Interpolator", "ModelConfig", "interpolate", "load_checkpoint", "save_checkpoint",
    "dynamic_local_conv", "joint_window_attention",
    "census_loss", "charbonnier", "consistency_losses", "reconstruction_loss", "psnr", "ssim",
]
__version__ = "0.1.0"
