"""Configuration, two-stage forward pass and verification harnesses."""
from .config import PipelineConfig, apply_overrides, load_config, parse_config
from .harness import SUBJECTS, GradcheckReport, OverfitResult, gradcheck, overfit_toy, smooth
from .model import (ForwardResult, ModelParams, QueryProposalSet, depth_grid, forward, forward_from_depth,
                    image_features, init_params, stage1_proposals, upsample_nearest, zero_params)

__all__ = [
    "PipelineConfig", "apply_overrides", "load_config", "parse_config",
    "SUBJECTS", "GradcheckReport", "OverfitResult", "gradcheck", "overfit_toy", "smooth",
    "ForwardResult", "ModelParams", "QueryProposalSet", "depth_grid", "forward", "forward_from_depth",
    "image_features", "init_params", "stage1_proposals", "upsample_nearest", "zero_params",
]
