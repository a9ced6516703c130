import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resale_pricer.alignment import (
    GroupConfig,
    RewardConfig,
    TrajectoryLogprobs,
    combined_reward,
    group_advantages,
    grpo_surrogate,
    price_accuracy_reward,
    score_group,
    subset_recall,
)
from resale_pricer.errors import ValidationError


def traj(current, old=None, ref=None):
    current = tuple(current)
    return TrajectoryLogprobs(
        current=current,
        old=tuple(old) if old is not None else current,
        ref=tuple(ref) if ref is not None else current,
    )


def traj_with_ratio(ratio, length=4):
    """Trajectory whose sequence-level importance ratio is exactly `ratio`."""
    delta = math.log(ratio) / length
    old = tuple(-1.0 for _ in range(length))
    current = tuple(o + delta for o in old)
    return TrajectoryLogprobs(current=current, old=old, ref=current)


class TestPriceAccuracy:
    def test_exact_prediction(self):
        assert price_accuracy_reward(100.0, 100.0) == 1.0

    def test_half_point_at_twenty_percent_error(self):
        assert price_accuracy_reward(120.0, 100.0, alpha=25.0) == pytest.approx(0.5, abs=1e-12)

    def test_sign_symmetric(self):
        for delta in (0.05, 0.2, 0.7):
            up = price_accuracy_reward(100 * (1 + delta), 100.0)
            down = price_accuracy_reward(100 * (1 - delta), 100.0)
            assert up == pytest.approx(down, abs=1e-12)

    def test_monotone_decreasing_in_error(self):
        values = [price_accuracy_reward(100.0 + e, 100.0) for e in (0, 10, 50, 200, 10_000)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_non_positive_truth_rejected(self):
        with pytest.raises(ValidationError):
            price_accuracy_reward(10.0, 0.0)


class TestSubsetRecall:
    def test_full(self):
        assert subset_recall({"B1", "B2"}, {"B1", "B2"}) == 1.0

    def test_disjoint(self):
        assert subset_recall({"B9"}, {"B1", "B2"}) == 0.0

    def test_half(self):
        assert subset_recall({"B1", "B2"}, {"B1", "B2", "B3", "B4"}) == 0.5

    def test_duplicates_deduplicated(self):
        assert subset_recall(["B1", "B1"], ["B1", "B2", "B2"]) == 0.5

    def test_empty_golden_rejected(self):
        with pytest.raises(ValidationError):
            subset_recall({"B1"}, set())


class TestCombinedReward:
    def test_perfect(self):
        report = combined_reward(100.0, 100.0, {"B1"}, {"B1"})
        assert report.reward == 1.0

    def test_recall_gates_to_zero(self):
        report = combined_reward(100.0, 100.0, set(), {"B1"})
        assert report.reward == 0.0
        assert report.price_term == 1.0

    def test_quarter_case(self):
        report = combined_reward(120.0, 100.0, {"B1"}, {"B1", "B2"},
                                 RewardConfig(alpha=25.0))
        assert report.reward == pytest.approx(0.25, abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(
        st.floats(0.01, 1e6), st.floats(0.01, 1e6),
        st.sets(st.integers(1, 10)), st.sets(st.integers(1, 10), min_size=1),
    )
    def test_bounds_and_decomposition(self, pred, truth, cited_idx, golden_idx):
        cited = {f"B{i}" for i in cited_idx}
        golden = {f"B{i}" for i in golden_idx}
        report = combined_reward(pred, truth, cited, golden)
        assert 0.0 <= report.reward <= 1.0
        assert report.reward == report.price_term * report.recall_term


class TestGroupAdvantages:
    def test_equal_rewards_all_zero(self):
        assert group_advantages([0.7] * 8) == [0.0] * 8

    def test_binary_group(self):
        assert group_advantages([1.0, 0.0]) == pytest.approx([1.0, -1.0])

    def test_requires_two(self):
        with pytest.raises(ValidationError):
            group_advantages([1.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=16))
    def test_sums_to_zero(self, rewards):
        advantages = group_advantages(rewards)
        assert abs(sum(advantages)) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.001, 1), min_size=2, max_size=8),
           st.floats(0.1, 100))
    def test_invariant_to_positive_scaling(self, rewards, scale):
        base = group_advantages(rewards)
        scaled = group_advantages([r * scale for r in rewards])
        assert all(b == pytest.approx(s, abs=1e-6) for b, s in zip(base, scaled))


class TestGrpoSurrogate:
    def test_identical_policies_zero_objective(self):
        rng = random.Random(3)
        rewards = [rng.random() for _ in range(8)]
        advantages = group_advantages(rewards)
        trajs = [traj([-rng.random() for _ in range(6)]) for _ in range(8)]
        objective = grpo_surrogate(trajs, advantages, GroupConfig())
        assert objective == pytest.approx(0.0, abs=1e-9)

    def test_clip_upper_example(self):
        # ratio 1.3 with eps 0.2 and A=1: clipped to 1.2
        value = grpo_surrogate([traj_with_ratio(1.3)], [1.0],
                               GroupConfig(epsilon=0.2, beta=0.0))
        assert value == pytest.approx(1.2, abs=1e-9)

    def test_clip_lower_example(self):
        # ratio 0.7 with eps 0.2 and A=-1: min(-0.7, -0.8) = -0.8
        value = grpo_surrogate([traj_with_ratio(0.7)], [-1.0],
                               GroupConfig(epsilon=0.2, beta=0.0))
        assert value == pytest.approx(-0.8, abs=1e-9)

    def test_no_clip_inside_band(self):
        value = grpo_surrogate([traj_with_ratio(1.1)], [1.0],
                               GroupConfig(epsilon=0.2, beta=0.0))
        assert value == pytest.approx(1.1, abs=1e-9)

    def test_kl_nonnegative_on_random_pairs(self):
        from resale_pricer.alignment import _kl_penalty

        rng = random.Random(5)
        for _ in range(10_000):
            cur = [-rng.random() * 8 for _ in range(3)]
            ref = [-rng.random() * 8 for _ in range(3)]
            t = TrajectoryLogprobs(current=tuple(cur), old=tuple(cur), ref=tuple(ref))
            assert _kl_penalty(t) >= 0.0

    def test_kl_zero_iff_equal(self):
        from resale_pricer.alignment import _kl_penalty

        t = traj([-0.5, -1.0])
        assert _kl_penalty(t) == 0.0

    def test_clipped_bounded_by_unclipped(self):
        rng = random.Random(7)
        for _ in range(500):
            ratio = math.exp(rng.uniform(-1.5, 1.5))
            advantage = rng.uniform(-2, 2)
            epsilon = rng.uniform(0.05, 0.5)
            clipped = min(max(ratio, 1 - epsilon), 1 + epsilon)
            term = min(ratio * advantage, clipped * advantage)
            assert term <= ratio * advantage + 1e-12

    def test_kl_penalty_reduces_objective(self):
        shifted = TrajectoryLogprobs(
            current=(-1.0, -1.0), old=(-1.0, -1.0), ref=(-2.0, -0.5))
        with_kl = grpo_surrogate([shifted], [1.0], GroupConfig(beta=0.1))
        without_kl = grpo_surrogate([shifted], [1.0], GroupConfig(beta=0.0))
        assert with_kl < without_kl

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            grpo_surrogate([traj([-1.0])], [1.0, -1.0])

    def test_trajectory_validation(self):
        with pytest.raises(ValidationError):
            TrajectoryLogprobs(current=(-1.0,), old=(-1.0, -2.0), ref=(-1.0,))
        with pytest.raises(ValidationError):
            TrajectoryLogprobs(current=(0.5,), old=(-1.0,), ref=(-1.0,))


class TestScoreGroup:
    def test_with_logprobs(self):
        samples = [
            {"pred": 100.0, "truth": 100.0, "cited": ["B1"], "golden": ["B1"],
             "logprobs": {"current": [-1.0], "old": [-1.0], "ref": [-1.0]}},
            {"pred": 150.0, "truth": 100.0, "cited": [], "golden": ["B1"],
             "logprobs": {"current": [-1.0], "old": [-1.0], "ref": [-1.0]}},
        ]
        result = score_group(samples)
        assert result["rewards"][0] == 1.0
        assert result["rewards"][1] == 0.0
        assert result["advantages"] == pytest.approx([1.0, -1.0])
        assert result["objective"] == pytest.approx(0.0, abs=1e-9)

    def test_without_logprobs(self):
        samples = [
            {"pred": 100.0, "truth": 100.0, "cited": ["B1"], "golden": ["B1"]},
            {"pred": 200.0, "truth": 100.0, "cited": ["B1"], "golden": ["B1"]},
        ]
        result = score_group(samples)
        assert result["objective"] is None
        assert len(result["advantages"]) == 2


class TestConfigs:
    def test_group_defaults(self):
        cfg = GroupConfig()
        assert cfg.group_size == 8
        assert cfg.epsilon == 0.2
        assert cfg.beta == 0.01

    def test_validation(self):
        with pytest.raises(ValidationError):
            GroupConfig(group_size=1)
        with pytest.raises(ValidationError):
            GroupConfig(epsilon=0.0)
        with pytest.raises(ValidationError):
            RewardConfig(alpha=0.0)
