"""Tilt-trajectory view interpolation and tri-plane reconstruction at desk scale."""

from .camera import CameraPose, TrajectoryConfig, ViewRole, look_at_pose, main_view_poses, tilt_trajectory
from .config import RunConfig, stream_seed
from .diffusion import assign_ref_cond, dvi_sample, dvi_train_step, make_schedule, q_sample
from .errors import ConfigError, DegenerateUpError, NumericalError, ShapeError
from .fusion import CrossModalFusion, cross_modal_attention, fuse
from .interpolate import DVIInterpolator
from .mesh import Mesh, marching_cubes
from .metrics import EvalProtocol, chamfer, evaluate_protocol, f_score, psnr, ssim, volume_iou
from .reconstruct import LossWeights, SupervisionSet, TriPlaneReconstructor, compute_loss, render_supervision
from .render import Intrinsics, RenderConfig, render_view
from .triplane import AnalyticField, AnalyticShape, TriPlane, TriPlaneField, sample_triplane

__version__ = "0.1.0"

__all__ = [
    "AnalyticField", "AnalyticShape", "CameraPose", "ConfigError", "CrossModalFusion", "DVIInterpolator",
    "DegenerateUpError", "EvalProtocol", "Intrinsics", "LossWeights", "Mesh", "NumericalError", "RenderConfig",
    "RunConfig", "ShapeError", "SupervisionSet", "TrajectoryConfig", "TriPlane", "TriPlaneField",
    "TriPlaneReconstructor", "ViewRole", "assign_ref_cond", "chamfer", "compute_loss", "cross_modal_attention",
    "dvi_sample", "dvi_train_step", "evaluate_protocol", "f_score", "fuse", "look_at_pose", "main_view_poses",
    "make_schedule", "marching_cubes", "psnr", "q_sample", "render_supervision", "render_view",
    "sample_triplane", "ssim", "stream_seed", "tilt_trajectory", "volume_iou",
]
