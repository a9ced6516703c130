"""Numeric core for group-relative policy optimization.

Evaluates the composite reward (price accuracy x reference recall), the
group-normalized advantages, and the clipped importance-ratio surrogate with
a KL penalty, over caller-supplied trajectory logprobs. No parameters are
updated here; this is the scoring side consumed by an external trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ValidationError

DEFAULT_ALPHA = 25.0          # price term hits 0.5 exactly at 20% relative error
_ZERO_STD = 1e-8


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")


@dataclass(frozen=True)
class RewardReport:
    price_term: float
    recall_term: float
    reward: float


@dataclass(frozen=True)
class GroupConfig:
    group_size: int = 8
    epsilon: float = 0.2
    beta: float = 0.01

    def __post_init__(self):
        if self.group_size < 2:
            raise ValidationError("group_size must be >= 2")
        if not 0.0 < self.epsilon < 1.0:
            raise ValidationError("epsilon must be in (0, 1)")
        if self.beta < 0.0:
            raise ValidationError("beta must be >= 0")


@dataclass(frozen=True)
class TrajectoryLogprobs:
    """Per-token chosen logprobs under the current, old, and reference policies."""

    current: tuple[float, ...]
    old: tuple[float, ...]
    ref: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.current) == len(self.old) == len(self.ref)):
            raise ValidationError("logprob sequences must have equal length")
        if not self.current:
            raise ValidationError("trajectory must have at least one token")
        for seq in (self.current, self.old, self.ref):
            if any(lp > 0 for lp in seq):
                raise ValidationError("logprobs must be <= 0")


def price_accuracy_reward(predicted: float, truth: float, alpha: float = DEFAULT_ALPHA) -> float:
    """1 / (1 + alpha * ((predicted - truth) / truth)^2), in (0, 1]."""
    if truth <= 0:
        raise ValidationError("truth price must be positive")
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    rel = (predicted - truth) / truth
    return 1.0 / (1.0 + alpha * rel * rel)


def subset_recall(cited: Iterable[str], golden: Iterable[str]) -> float:
    """|cited ∩ golden| / |golden| over deduplicated label sets."""
    golden_set = set(golden)
    if not golden_set:
        raise ValidationError("golden subset must be non-empty")
    return len(set(cited) & golden_set) / len(golden_set)


def combined_reward(predicted: float, truth: float, cited: Iterable[str],
                    golden: Iterable[str], cfg: RewardConfig = RewardConfig()) -> RewardReport:
    """Product of the price-accuracy and recall terms, with both factors reported."""
    price_term = price_accuracy_reward(predicted, truth, cfg.alpha)
    recall_term = subset_recall(cited, golden)
    return RewardReport(price_term=price_term, recall_term=recall_term,
                        reward=price_term * recall_term)


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Standardize rewards within a group: (r - mean) / population std.

    Degenerate groups (std below 1e-8) get all-zero advantages instead of a
    division blow-up.
    """
    if len(rewards) < 2:
        raise ValidationError("a group needs at least 2 rewards")
    n = len(rewards)
    mean = sum(rewards) / n
    variance = sum((r - mean) ** 2 for r in rewards) / n
    std = math.sqrt(variance)
    if std < _ZERO_STD:
        return [0.0] * n
    return [(r - mean) / std for r in rewards]


def _sequence_ratio(traj: TrajectoryLogprobs) -> float:
    return math.exp(sum(c - o for c, o in zip(traj.current, traj.old)))


def _kl_penalty(traj: TrajectoryLogprobs) -> float:
    """Per-trajectory mean of exp(ref - cur) - (ref - cur) - 1; always >= 0."""
    total = 0.0
    for cur, ref in zip(traj.current, traj.ref):
        delta = ref - cur
        total += math.exp(delta) - delta - 1.0
    return total / len(traj.current)


def grpo_surrogate(trajs: Sequence[TrajectoryLogprobs], advantages: Sequence[float],
                   cfg: GroupConfig = GroupConfig()) -> float:
    """Mean clipped-surrogate objective over a group of trajectories.

    Uses the sequence-level importance ratio exp(sum(logp_cur - logp_old));
    each term is min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) minus the
    beta-weighted KL penalty to the reference policy.
    """
    if len(trajs) != len(advantages):
        raise ValidationError(
            f"got {len(trajs)} trajectories but {len(advantages)} advantages")
    if not trajs:
        raise ValidationError("empty trajectory group")
    total = 0.0
    for traj, advantage in zip(trajs, advantages):
        ratio = _sequence_ratio(traj)
        clipped = min(max(ratio, 1.0 - cfg.epsilon), 1.0 + cfg.epsilon)
        term = min(ratio * advantage, clipped * advantage)
        total += term - cfg.beta * _kl_penalty(traj)
    return total / len(trajs)


def score_group(samples: Sequence[dict], reward_cfg: RewardConfig = RewardConfig(),
                group_cfg: GroupConfig = GroupConfig()) -> dict:
    """Score one batch-mode group record.

    Each sample carries `pred`, `truth`, `cited`, `golden`, and optionally
    `logprobs: {current, old, ref}`. The objective is computed only when all
    samples supply logprobs.
    """
    reports = [
        combined_reward(s["pred"], s["truth"], s.get("cited", ()), s["golden"], reward_cfg)
        for s in samples
    ]
    rewards = [r.reward for r in reports]
    advantages = group_advantages(rewards) if len(rewards) >= 2 else [0.0] * len(rewards)
    objective = None
    if all("logprobs" in s for s in samples):
        trajs = [
            TrajectoryLogprobs(
                current=tuple(s["logprobs"]["current"]),
                old=tuple(s["logprobs"]["old"]),
                ref=tuple(s["logprobs"]["ref"]),
            )
            for s in samples
        ]
        objective = grpo_surrogate(trajs, advantages, group_cfg)
    return {
        "rewards": rewards,
        "price_terms": [r.price_term for r in reports],
        "recall_terms": [r.recall_term for r in reports],
        "advantages": advantages,
        "objective": objective,
    }
