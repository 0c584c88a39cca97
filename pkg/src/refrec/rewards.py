"""Composite reward computation: dynamic IoU threshold, binary IoU reward,
and the group quality adjustment applied inside hard groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import Box, ImageDims, area_ratio, iou
from .response import ParsedResponse, format_reward


@dataclass(frozen=True)
class RewardConfig:
    """Hyperparameters of the reward stack.

    alpha/beta_end bound the IoU threshold schedule, d_max caps the
    small-target penalty, p weights the group quality adjustment, and
    tau_q_start/tau_q_end define the linear quality-threshold schedule
    (absolute counts within a group of group_size responses).
    """

    alpha: float = 0.5
    beta_end: float = 0.8
    d_max: float = 0.15
    p: float = 0.5
    total_steps: int = 1000
    tau_q_start: float = 2.0
    tau_q_end: float = 4.0
    group_size: int = 8

    def __post_init__(self):
        if not (0.0 <= self.alpha <= self.beta_end <= 1.0):
            raise ValueError("require 0 <= alpha <= beta_end <= 1")
        if not (0.0 <= self.d_max <= 1.0):
            raise ValueError("require 0 <= d_max <= 1")
        if self.p < 0:
            raise ValueError("require p >= 0")
        if self.total_steps < 1:
            raise ValueError("require total_steps >= 1")
        if self.group_size < 1:
            raise ValueError("require group_size >= 1")
        if not (0.0 <= self.tau_q_start <= self.tau_q_end <= self.group_size):
            raise ValueError("require 0 <= tau_q_start <= tau_q_end <= group_size")


@dataclass(frozen=True)
class RewardBreakdown:
    """Per-response reward decomposition; total = format + dyiou + quality."""

    format: int
    dyiou: int
    iou_value: float
    threshold_used: float
    quality_adjustment: float
    total: float
    correct: bool


def dyiou_threshold(t: int, s: float, cfg: RewardConfig) -> float:
    """IoU threshold at training step t for a target of area ratio s.

    Rises linearly from alpha to beta_end over training; small targets
    receive up to d_max of relief, floored at alpha.
    """
    if not (0 <= t <= cfg.total_steps):
        raise ValueError(f"step {t} outside [0, {cfg.total_steps}]")
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"area ratio {s} outside [0, 1]")
    raw = cfg.alpha + (cfg.beta_end - cfg.alpha) * t / cfg.total_steps - cfg.d_max * (1.0 - s)
    return max(raw, cfg.alpha)


def dyiou_reward(iou_value: float, threshold: float) -> int:
    """1 iff the IoU strictly exceeds the threshold."""
    return 1 if iou_value > threshold else 0


def quality_threshold(t: int, cfg: RewardConfig) -> float:
    """Linearly scheduled quality threshold tau_q at step t."""
    if not (0 <= t <= cfg.total_steps):
        raise ValueError(f"step {t} outside [0, {cfg.total_steps}]")
    return cfg.tau_q_start + (cfg.tau_q_end - cfg.tau_q_start) * t / cfg.total_steps


def score_group(
    responses: list[ParsedResponse],
    gt: Box | None,
    dims: ImageDims | None,
    t: int,
    cfg: RewardConfig,
) -> list[RewardBreakdown]:
    """Score one group of responses against a ground truth box (or absence).

    gt=None means the target is absent; an abstention then counts as
    correct. For a box ground truth, correctness is the binary dynamic
    IoU reward. Within hard groups (fewer than tau_q correct responses)
    every correct response gains +(k/n)*p and every incorrect one loses
    (k/n)*p.
    """
    n = cfg.group_size
    if len(responses) != n:
        raise ValueError(f"expected group of {n} responses, got {len(responses)}")

    if gt is not None:
        if dims is None:
            raise ValueError("image dims required for a box ground truth")
        s = area_ratio(gt, dims)
        threshold = dyiou_threshold(t, s, cfg)
    else:
        threshold = 0.0

    fmts, dyious, ious = [], [], []
    for r in responses:
        fmts.append(format_reward(r))
        if gt is None:
            dyious.append(1 if r.is_abstain else 0)
            ious.append(0.0)
        else:
            iv = iou(r.box, gt) if r.is_box else 0.0
            ious.append(iv)
            dyious.append(dyiou_reward(iv, threshold))

    k = sum(dyious)
    tau_q = quality_threshold(t, cfg)
    hard = k < tau_q
    adj_mag = (k / n) * cfg.p if hard else 0.0

    out = []
    for fmt, dy, iv in zip(fmts, dyious, ious):
        adj = adj_mag if dy == 1 else -adj_mag
        if not hard:
            adj = 0.0
        out.append(
            RewardBreakdown(
                format=fmt,
                dyiou=dy,
                iou_value=iv,
                threshold_used=threshold,
                quality_adjustment=adj,
                total=fmt + dy + adj,
                correct=dy == 1,
            )
        )
    return out
