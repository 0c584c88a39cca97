import numpy as np
import pytest

from refrec.geometry import Box, ImageDims
from refrec.response import parse, render
from refrec.rewards import (
    RewardConfig,
    dyiou_reward,
    dyiou_threshold,
    quality_threshold,
    score_group,
)

DEFAULTS = RewardConfig(total_steps=1000)


def box_response(box):
    return parse(render("t", box))


def abstain_response():
    return parse(render("t", None))


def malformed_response():
    return parse("garbage")


class TestDyiouThreshold:
    def test_schedule_start_full_size(self):
        assert dyiou_threshold(0, 1.0, DEFAULTS) == pytest.approx(0.5, abs=1e-9)

    def test_schedule_end_full_size(self):
        assert dyiou_threshold(1000, 1.0, DEFAULTS) == pytest.approx(0.8, abs=1e-9)

    def test_schedule_end_zero_size(self):
        assert dyiou_threshold(1000, 0.0, DEFAULTS) == pytest.approx(0.65, abs=1e-9)

    def test_midpoint(self):
        assert dyiou_threshold(500, 0.5, DEFAULTS) == pytest.approx(0.575, abs=1e-9)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            dyiou_threshold(1001, 0.5, DEFAULTS)

    def test_monotone_in_t_and_s(self):
        ts = np.linspace(0, 1000, 50).astype(int)
        ss = np.linspace(0, 1, 50)
        grid = np.array([[dyiou_threshold(int(t), float(s), DEFAULTS) for s in ss] for t in ts])
        assert (np.diff(grid, axis=0) >= -1e-12).all()  # along t
        assert (np.diff(grid, axis=1) >= -1e-12).all()  # along s

    def test_bounded_by_alpha_beta(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            tau = dyiou_threshold(int(rng.integers(0, 1001)), float(rng.random()), DEFAULTS)
            assert DEFAULTS.alpha <= tau <= DEFAULTS.beta_end


class TestDyiouReward:
    def test_above(self):
        assert dyiou_reward(0.9, 0.5) == 1

    def test_boundary_is_strict(self):
        assert dyiou_reward(0.5, 0.5) == 0

    def test_disjoint(self):
        assert dyiou_reward(0.0, 0.5) == 0


class TestQualityThreshold:
    CFG = RewardConfig(tau_q_start=2, tau_q_end=6, total_steps=100, group_size=8)

    def test_endpoints_and_midpoint(self):
        assert quality_threshold(0, self.CFG) == 2
        assert quality_threshold(100, self.CFG) == 6
        assert quality_threshold(50, self.CFG) == 4


class TestRewardConfig:
    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            RewardConfig(alpha=0.9, beta_end=0.8)
        with pytest.raises(ValueError):
            RewardConfig(tau_q_start=5, tau_q_end=3)
        with pytest.raises(ValueError):
            RewardConfig(p=-0.1)


class TestScoreGroup:
    DIMS = ImageDims(100, 100)
    GT = Box(10, 10, 50, 50)

    def _group(self, n_correct, n, cfg):
        good = box_response(self.GT)
        bad = box_response(Box(60, 60, 90, 90))
        return [good] * n_correct + [bad] * (n - n_correct)

    def test_hard_group_adjustment(self):
        cfg = RewardConfig(group_size=8, tau_q_start=4, tau_q_end=4, total_steps=10)
        responses = self._group(2, 8, cfg)
        out = score_group(responses, self.GT, self.DIMS, 0, cfg)
        assert all(b.quality_adjustment == pytest.approx(0.125) for b in out if b.correct)
        assert all(b.quality_adjustment == pytest.approx(-0.125) for b in out if not b.correct)
        for b in out:
            assert b.total == pytest.approx(b.format + b.dyiou + b.quality_adjustment)

    def test_easy_group_no_adjustment(self):
        cfg = RewardConfig(group_size=4, tau_q_start=2, tau_q_end=2, total_steps=10)
        out = score_group(self._group(4, 4, cfg), self.GT, self.DIMS, 0, cfg)
        assert all(b.quality_adjustment == 0.0 for b in out)
        assert all(b.total == b.format + b.dyiou for b in out)

    def test_all_wrong_hard_group_zero_adjustment(self):
        cfg = RewardConfig(group_size=4, tau_q_start=2, tau_q_end=2, total_steps=10)
        out = score_group(self._group(0, 4, cfg), self.GT, self.DIMS, 0, cfg)
        assert all(b.quality_adjustment == 0.0 for b in out)

    def test_absent_target_abstain_is_correct(self):
        cfg = RewardConfig(group_size=4, tau_q_start=0, tau_q_end=0, total_steps=10)
        responses = [abstain_response(), abstain_response(),
                     box_response(self.GT), malformed_response()]
        out = score_group(responses, None, None, 0, cfg)
        assert [b.dyiou for b in out] == [1, 1, 0, 0]
        assert [b.format for b in out] == [1, 1, 1, 0]

    def test_group_size_mismatch(self):
        cfg = RewardConfig(group_size=8)
        with pytest.raises(ValueError):
            score_group(self._group(1, 4, cfg), self.GT, self.DIMS, 0, cfg)

    def test_adjustment_sum_identity_random_groups(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            n = int(rng.integers(2, 12))
            k = int(rng.integers(0, n + 1))
            cfg = RewardConfig(group_size=n, tau_q_start=n, tau_q_end=n,
                               total_steps=10, p=float(rng.random()))
            out = score_group(self._group(k, n, cfg), self.GT, self.DIMS, 0, cfg)
            total_adj = sum(b.quality_adjustment for b in out)
            if k < n:  # tau_q = n, so the group is hard iff k < n
                assert total_adj == pytest.approx((k / n) * cfg.p * (2 * k - n), abs=1e-12)
            else:
                assert total_adj == 0.0

    def test_permutation_equivariant(self):
        cfg = RewardConfig(group_size=4, tau_q_start=3, tau_q_end=3, total_steps=10)
        responses = self._group(2, 4, cfg)
        out = score_group(responses, self.GT, self.DIMS, 0, cfg)
        perm = [2, 0, 3, 1]
        out_p = score_group([responses[i] for i in perm], self.GT, self.DIMS, 0, cfg)
        assert out_p == [out[i] for i in perm]

    def test_correct_flag_tracks_dyiou(self):
        cfg = RewardConfig(group_size=4, tau_q_start=0, tau_q_end=0, total_steps=10)
        out = score_group(self._group(2, 4, cfg), self.GT, self.DIMS, 0, cfg)
        assert all(b.correct == (b.dyiou == 1) for b in out)
