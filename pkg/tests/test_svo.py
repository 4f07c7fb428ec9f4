import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svo_marl.svo import (
    GroupUtility,
    SmoothedRewards,
    SvoParams,
    angular_distance,
    reward_angle,
    reward_angles,
    svo_utility,
    transform_step_rewards,
)
from svo_marl.envs import DEFAULT_WEIGHT

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestSvoParams:
    def test_degrees_roundtrip(self):
        p = SvoParams.from_degrees(45, 0.2)
        assert p.theta_svo == pytest.approx(math.pi / 4)
        assert p.theta_deg == pytest.approx(45)

    @pytest.mark.parametrize("theta", [-0.1, math.pi / 2 + 0.01, 4.0])
    def test_outside_quadrant_rejected(self, theta):
        with pytest.raises(ValueError):
            SvoParams(theta)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            SvoParams(0.0, -0.1)

    def test_task_default_weights(self):
        assert DEFAULT_WEIGHT == {"harvestpatch": 0.2, "cleanup": 0.1}


class TestSmoothing:
    def test_lambda_zero_is_memoryless(self):
        s = SmoothedRewards(3, lam=0.0)
        s.update([1, 2, 3])
        np.testing.assert_array_equal(s.update([4, 0, -1]), [4, 0, -1])

    def test_constant_reward_converges_to_geometric_limit(self):
        s = SmoothedRewards(1, lam=0.975)
        for _ in range(300):
            s.update([1.0])
        assert abs(s.traces[0] - 40.0) < 0.1

    def test_zero_rewards_stay_zero(self):
        s = SmoothedRewards(4)
        for _ in range(50):
            s.update(np.zeros(4))
        assert not s.traces.any()

    def test_reset_zeroes_traces(self):
        s = SmoothedRewards(2)
        s.update([3, 4])
        s.reset()
        assert not s.traces.any()

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            SmoothedRewards(3).update([1, 2])

    @pytest.mark.parametrize("lam", [-0.1, 1.0])
    def test_lambda_bounds(self, lam):
        with pytest.raises(ValueError):
            SmoothedRewards(2, lam)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(finite, finite), min_size=1, max_size=40), st.floats(0, 0.99))
    def test_linearity(self, pairs, lam):
        a, b, ab = SmoothedRewards(1, lam), SmoothedRewards(1, lam), SmoothedRewards(1, lam)
        for x, y in pairs:
            a.update([x])
            b.update([y])
            ab.update([x + y])
        assert ab.traces[0] == pytest.approx(a.traces[0] + b.traces[0], rel=1e-9, abs=1e-6)


class TestRewardAngle:
    def test_symmetric_group(self):
        assert reward_angle([2, 2, 2, 2, 2], 0) == pytest.approx(math.pi / 4)

    def test_pure_self(self):
        assert reward_angle([1, 0, 0, 0, 0], 0) == 0.0

    def test_pure_other(self):
        assert reward_angle([0, 1, 1, 1, 1], 0) == pytest.approx(math.pi / 2)

    def test_arctangent_oracle(self):
        # mean of others = 7.5, own = 3
        assert reward_angle([3, 6, 9], 0) == pytest.approx(1.1902899496825317, abs=1e-12)

    def test_degenerate_returns_supplied_value(self):
        assert math.isnan(reward_angle([0, 0, 0], 1))
        assert reward_angle([0, 1e-12, 0], 0, degenerate=0.7) == 0.7

    def test_group_of_one_rejected(self):
        with pytest.raises(ValueError):
            reward_angle([1.0], 0)

    def test_negative_rewards_handled(self):
        assert reward_angle([-50, 0], 0) == pytest.approx(math.pi)
        assert reward_angle([0, -2], 0) == pytest.approx(-math.pi / 2)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(finite, min_size=2, max_size=8), st.floats(1e-3, 1e3))
    def test_vectorized_matches_scalar(self, r, c):
        theta = np.full(len(r), 0.3)
        vec = reward_angles(r, theta)
        for i in range(len(r)):
            scalar = reward_angle(r, i, degenerate=0.3)
            assert vec[i] == pytest.approx(scalar, abs=1e-12)


class TestUtility:
    def test_zero_penalty_at_target(self):
        assert svo_utility(1.0, SvoParams(math.pi / 4, 0.2), math.pi / 4) == 1.0

    def test_direct_substitution(self):
        u = svo_utility(0.0, SvoParams(math.pi / 2, 0.1), 0.0)
        assert u == pytest.approx(-0.15707963267948966, abs=1e-15)

    def test_angular_distance_wraps(self):
        assert angular_distance(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
        assert angular_distance(math.pi / 2, -math.pi) == pytest.approx(math.pi / 2)
        assert angular_distance(0.0, math.pi) == pytest.approx(math.pi)

    @settings(max_examples=200, deadline=None)
    @given(finite, st.floats(0, math.pi / 2), st.floats(-math.pi, math.pi), st.floats(0, 5))
    def test_penalty_non_negative(self, r, theta, observed, w):
        u = svo_utility(r, SvoParams(theta, w), observed)
        assert u <= r + 1e-12
        if w == 0:
            assert u == r

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, math.pi / 2), st.floats(0, math.pi), st.floats(0, math.pi))
    def test_penalty_monotone_in_distance(self, theta, d1, d2):
        p = SvoParams(theta, 0.3)
        lo, hi = sorted((d1, d2))
        assert svo_utility(0, p, theta + hi) <= svo_utility(0, p, theta + lo) + 1e-12


class TestTransform:
    def test_selfish_agents_with_zero_observed_angle(self):
        params = [SvoParams(0.0, 0.2)] * 3
        s = SmoothedRewards(3)
        np.testing.assert_array_equal(transform_step_rewards([1, 0, 0], params, s)[:1], [1.0])

    def test_zero_weight_is_identity(self, rng):
        params = [SvoParams(0.7, 0.0)] * 4
        s = SmoothedRewards(4)
        for _ in range(20):
            r = rng.integers(-50, 2, size=4).astype(float)
            np.testing.assert_array_equal(transform_step_rewards(r, params, s), r)

    def test_two_agent_hand_computation(self):
        s = SmoothedRewards(2)
        s.traces[:] = 40.0
        s.lam = 1.0 - 1e-12  # keep traces at 40 for this step
        params = [SvoParams(0.0, 0.2), SvoParams(math.pi / 2, 0.2)]
        u = transform_step_rewards([0, 0], params, s)
        np.testing.assert_allclose(u, [-0.15707963267948966] * 2, atol=1e-9)

    def test_degenerate_start_costs_nothing(self):
        params = [SvoParams(0.0, 0.2), SvoParams(math.pi / 2, 0.2)]
        np.testing.assert_array_equal(transform_step_rewards([0, 0], params, SmoothedRewards(2)), [0, 0])

    def test_group_utility_matches_functional_form(self, rng):
        params = [SvoParams(float(t), 0.2) for t in rng.uniform(0, math.pi / 2, 5)]
        g = GroupUtility(params)
        s = SmoothedRewards(5)
        for _ in range(100):
            r = rng.integers(-1, 2, size=5).astype(float)
            np.testing.assert_allclose(g(r), transform_step_rewards(r, params, s), atol=1e-12)

    def test_mismatched_params(self):
        with pytest.raises(ValueError):
            transform_step_rewards([1, 2], [SvoParams(0.0)], SmoothedRewards(2))
