"""Generative ischemic stroke lesion segmentation at desk scale: CTP
preprocessing, extractor/generator/segmentor UNets, the three training losses
and the cross-validated training protocol, on a self-contained float64
autodiff core."""

from .autodiff import Tensor, gradcheck, no_grad
from .cases import CaseRecord, PerfusionMaps
from .geometry import heatmap_from_sdf, signed_distance
from .layers import UNet, UNetSpec, xavier_init
from .losses import (LossWeights, extractor_loss, generalized_dice,
                     generator_loss, pr_loss, weighted_ce)
from .perfusion import CtpVolume, detect_time_points, sample_frames, smooth_curve, time_density_curve
from .phantom import PhantomSpec, generate_phantom_case
from .pipeline import (PipelineState, TrainConfig, cross_validate, dice_score,
                       infer, lr_schedule)

__all__ = [
    "CaseRecord", "CtpVolume", "LossWeights", "PerfusionMaps", "PhantomSpec",
    "PipelineState", "Tensor", "TrainConfig", "UNet", "UNetSpec",
    "cross_validate", "detect_time_points", "dice_score", "extractor_loss",
    "generalized_dice", "generate_phantom_case", "generator_loss", "gradcheck",
    "heatmap_from_sdf", "infer", "lr_schedule", "no_grad", "pr_loss",
    "sample_frames", "signed_distance", "smooth_curve", "time_density_curve",
    "weighted_ce", "xavier_init",
]
