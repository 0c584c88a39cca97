"""Group-relative advantage normalization, the GRPO surrogate objective,
and exact KL divergence for categorical policies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GrpoConfig:
    kl_beta: float = 0.04  # conventional default; tune per task
    epsilon_std: float = 1e-8

    def __post_init__(self):
        if self.kl_beta < 0:
            raise ValueError("require kl_beta >= 0")
        if self.epsilon_std <= 0:
            raise ValueError("require epsilon_std > 0")


@dataclass(frozen=True)
class Group:
    """One sampled group: rewards, normalized advantages, and per-response
    log-probabilities under the current and sampling policies."""

    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    logprob_current: tuple[float, ...]
    logprob_old: tuple[float, ...]

    def __post_init__(self):
        n = len(self.rewards)
        if n < 2:
            raise ValueError("group needs at least 2 responses")
        for name in ("advantages", "logprob_current", "logprob_old"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length mismatch")


def advantages(rewards, epsilon_std: float = 1e-8) -> list[float]:
    """Normalize rewards to group-relative advantages.

    Uses the population standard deviation with an additive epsilon
    guard; a zero-spread group yields all-zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need a flat list of at least 2 rewards")
    std = float(r.std())
    if std < epsilon_std:
        return [0.0] * r.size
    return list((r - r.mean()) / (std + epsilon_std))


def surrogate(group: Group, kl: float, cfg: GrpoConfig) -> float:
    """GRPO objective for one group: mean importance-weighted advantage
    minus the KL penalty. Maximized by the trainer."""
    cur = np.asarray(group.logprob_current, dtype=float)
    old = np.asarray(group.logprob_old, dtype=float)
    if not (np.isfinite(cur).all() and np.isfinite(old).all()):
        raise ValueError("non-finite log-probabilities")
    ratios = np.exp(cur - old)
    adv = np.asarray(group.advantages, dtype=float)
    return float(np.mean(ratios * adv) - cfg.kl_beta * kl)


def kl_categorical(p, q) -> float:
    """Exact KL divergence sum_i p_i * ln(p_i / q_i) between two
    categorical distributions, with 0 * ln(0/q) = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must share length")
    for v, name in ((p, "p"), (q, "q")):
        if abs(float(v.sum()) - 1.0) > 1e-9:
            raise ValueError(f"{name} does not sum to 1")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("q must be positive wherever p > 0")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))
