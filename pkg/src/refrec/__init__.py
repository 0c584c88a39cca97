"""refrec: reward shaping, group-relative policy optimization at toy scale,
benchmark evaluation, and annotation-pipeline orchestration for referring
expression comprehension."""

__version__ = "0.1.0"

from .geometry import Box, ImageDims, InvalidBoxError, area_ratio, iou
from .response import ParsedResponse, RejectionLexicon, detect_rejection, format_reward, parse
from .rewards import RewardBreakdown, RewardConfig, dyiou_reward, dyiou_threshold, quality_threshold, score_group
from .grpo import Group, GrpoConfig, advantages, kl_categorical, surrogate

__all__ = [
    "Box",
    "ImageDims",
    "InvalidBoxError",
    "area_ratio",
    "iou",
    "ParsedResponse",
    "RejectionLexicon",
    "detect_rejection",
    "format_reward",
    "parse",
    "RewardBreakdown",
    "RewardConfig",
    "dyiou_reward",
    "dyiou_threshold",
    "quality_threshold",
    "score_group",
    "Group",
    "GrpoConfig",
    "advantages",
    "kl_categorical",
    "surrogate",
]
