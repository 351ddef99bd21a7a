"""Costs: quadratic stage/terminal forms, collision penalty, trajectory sums."""

import math

import numpy as np
import pytest

from stocplan.costs import (
    CollisionPenaltyParams,
    CostWeights,
    collision_penalty,
    collision_penalty_gradient,
    collision_penalty_hessian,
    stage_cost,
    terminal_cost,
    trajectory_cost,
)

GOAL = np.array([1.0, -2.0, 0.5, 0.0])
W = CostWeights.from_diagonals([5.0, 5.0, 1.0, 0.1], [1.0, 1.0], GOAL)


def quad_oracle(vec, mat):
    """Explicit double loop, independent of the library's matrix products."""
    total = 0.0
    for i in range(len(vec)):
        for j in range(len(vec)):
            total += vec[i] * mat[i, j] * vec[j]
    return total


class TestStageCost:
    def test_zero_at_goal(self):
        assert stage_cost(GOAL, np.zeros(2), W) == 0.0

    def test_hand_sum(self):
        w = CostWeights(w_x=np.eye(4), w_u=np.eye(2), w_xf=np.eye(4),
                        x_goal=np.zeros(4))
        assert stage_cost(np.array([1.0, 0, 0, 0]), np.array([1.0, 1.0]), w) == 3.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.normal(size=4)
            u = rng.normal(size=2)
            expected = quad_oracle(x - GOAL, W.w_x) + quad_oracle(u, W.w_u)
            np.testing.assert_allclose(stage_cost(x, u, W), expected, rtol=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        assert all(stage_cost(rng.normal(size=4), rng.normal(size=2), W) >= 0.0
                   for _ in range(200))


class TestTerminalCost:
    def test_zero_at_goal(self):
        assert terminal_cost(GOAL, W) == 0.0

    def test_doubled_weight(self):
        w2 = CostWeights(w_x=W.w_x, w_u=W.w_u, w_xf=2.0 * W.w_x, x_goal=GOAL)
        w1 = CostWeights(w_x=W.w_x, w_u=W.w_u, w_xf=W.w_x, x_goal=GOAL)
        x = np.array([2.0, 1.0, 0.0, 0.2])
        np.testing.assert_allclose(terminal_cost(x, w2), 2.0 * terminal_cost(x, w1))

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = rng.normal(size=4)
            np.testing.assert_allclose(terminal_cost(x, W),
                                       quad_oracle(x - GOAL, W.w_xf), rtol=1e-12)


def joint_state(positions):
    """Stacked state with given planar positions, zero heading/steering."""
    blocks = [np.array([p[0], p[1], 0.0, 0.0]) for p in positions]
    return np.concatenate(blocks)


class TestCollisionPenalty:
    params = CollisionPenaltyParams(scale=100.0, r_thresh=0.5)

    def test_at_threshold_distance(self):
        x = joint_state([(0.0, 0.0), (0.5, 0.0)])
        np.testing.assert_allclose(collision_penalty(x, self.params, 2), 100.0)

    def test_unit_excess(self):
        d = math.sqrt(1.0 + 0.25)
        x = joint_state([(0.0, 0.0), (d, 0.0)])
        np.testing.assert_allclose(collision_penalty(x, self.params, 2),
                                   100.0 * math.exp(-1.0), rtol=1e-12)

    def test_three_agents_equilateral(self):
        d = 1.2
        x = joint_state([(0.0, 0.0), (d, 0.0), (d / 2, d * math.sqrt(3) / 2)])
        expected = 3.0 * 100.0 * math.exp(-(d ** 2 - 0.25))
        np.testing.assert_allclose(collision_penalty(x, self.params, 3), expected,
                                   rtol=1e-12)

    def test_single_agent_is_zero(self):
        assert collision_penalty(np.zeros(4), self.params, 1) == 0.0

    def test_strictly_positive_and_decreasing(self):
        values = []
        for d in np.linspace(0.1, 4.0, 30):
            x = joint_state([(0.0, 0.0), (d, 0.0)])
            values.append(collision_penalty(x, self.params, 2))
        assert all(v > 0.0 for v in values)
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(-2, 2, (3, 2))
        base = collision_penalty(joint_state(pos), self.params, 3)
        for perm in ((1, 0, 2), (2, 1, 0), (1, 2, 0)):
            permuted = collision_penalty(joint_state(pos[list(perm)]), self.params, 3)
            np.testing.assert_allclose(permuted, base, rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = joint_state(rng.uniform(-1, 1, (3, 2)))
        grad = collision_penalty_gradient(x, self.params, 3)
        h = 1e-7
        for i in range(12):
            dx = np.zeros(12)
            dx[i] = h
            fd = (collision_penalty(x + dx, self.params, 3)
                  - collision_penalty(x - dx, self.params, 3)) / (2 * h)
            np.testing.assert_allclose(grad[i], fd, rtol=1e-5, atol=1e-8)

    def test_hessian_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = joint_state(rng.uniform(-1, 1, (2, 2)))
        hess = collision_penalty_hessian(x, self.params, 2)
        h = 1e-5
        for i in range(8):
            dx = np.zeros(8)
            dx[i] = h
            fd = (collision_penalty_gradient(x + dx, self.params, 2)
                  - collision_penalty_gradient(x - dx, self.params, 2)) / (2 * h)
            np.testing.assert_allclose(hess[:, i], fd, rtol=1e-4, atol=1e-6)


class TestTrajectoryCost:
    def test_zero_at_goal(self):
        states = np.tile(GOAL, (6, 1))
        controls = np.zeros((5, 2))
        assert trajectory_cost(states, controls, W) == 0.0

    def test_single_step_reduction(self):
        rng = np.random.default_rng(6)
        x0, x1 = rng.normal(size=4), rng.normal(size=4)
        u0 = rng.normal(size=2)
        total = trajectory_cost(np.stack([x0, x1]), u0[None, :], W)
        np.testing.assert_allclose(total, stage_cost(x0, u0, W) + terminal_cost(x1, W))

    def test_matches_termwise_oracle(self):
        rng = np.random.default_rng(7)
        states = rng.normal(size=(9, 4))
        controls = rng.normal(size=(8, 2))
        expected = sum(stage_cost(states[t], controls[t], W) for t in range(8))
        expected += terminal_cost(states[8], W)
        np.testing.assert_allclose(trajectory_cost(states, controls, W), expected,
                                   rtol=1e-12)

    def test_segment_additivity(self):
        rng = np.random.default_rng(8)
        states = rng.normal(size=(11, 4))
        controls = rng.normal(size=(10, 2))
        full = trajectory_cost(states, controls, W)
        stages = sum(stage_cost(states[t], controls[t], W) for t in range(10))
        np.testing.assert_allclose(full, stages + terminal_cost(states[10], W),
                                   rtol=1e-12)

    def test_multi_agent_includes_collision(self):
        params = CollisionPenaltyParams(scale=10.0, r_thresh=0.5)
        goal8 = np.zeros(8)
        w8 = CostWeights(w_x=np.eye(8), w_u=np.eye(4), w_xf=np.eye(8), x_goal=goal8)
        states = np.zeros((3, 8))
        states[:, 4] = 0.6  # second agent offset in x
        controls = np.zeros((2, 4))
        with_pen = trajectory_cost(states, controls, w8, params, 2)
        without = trajectory_cost(states, controls, w8)
        # stage collision applied at t = 0, 1 but not at the terminal state
        per_state = collision_penalty(states[0], params, 2)
        np.testing.assert_allclose(with_pen - without, 2.0 * per_state, rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            trajectory_cost(np.zeros((4, 4)), np.zeros((4, 2)), W)


class TestWeightValidation:
    def test_rejects_asymmetric(self):
        bad = np.eye(4)
        bad[0, 1] = 0.5
        with pytest.raises(ValueError):
            CostWeights(w_x=bad, w_u=np.eye(2), w_xf=np.eye(4), x_goal=np.zeros(4))

    def test_rejects_indefinite_control_weight(self):
        with pytest.raises(ValueError):
            CostWeights(w_x=np.eye(4), w_u=np.diag([1.0, 0.0]), w_xf=np.eye(4),
                        x_goal=np.zeros(4))

    def test_rejects_negative_state_weight(self):
        with pytest.raises(ValueError):
            CostWeights(w_x=np.diag([1, 1, 1, -0.1]), w_u=np.eye(2),
                        w_xf=np.eye(4), x_goal=np.zeros(4))
