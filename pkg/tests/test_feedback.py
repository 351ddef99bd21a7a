"""Feedback synthesis: Riccati recursion, gains, and multi-agent decoupling."""

import numpy as np
import pytest
import scipy.linalg

from stocplan.feedback import (
    LinearizedSystem,
    LQRWeights,
    apply_feedback,
    assemble_joint_gains,
    decoupled_gains,
    linearize_along,
    riccati_backward,
    synthesize_gains,
)
from stocplan.scenario import single_agent_scenario, three_agent_scenario
from stocplan.trajopt import solve_ocp
from stocplan.dynamics import jacobians, fd_jacobians


def random_ltv(rng, n_x=4, n_u=2, horizon=10):
    a = rng.uniform(-1, 1, (horizon, n_x, n_x))
    # keep state matrices near identity so rollouts stay bounded
    a = np.eye(n_x)[None, :, :] + 0.3 * a
    b = rng.uniform(-1, 1, (horizon, n_x, n_u))
    return LinearizedSystem(a=a, b=b)


def random_psd(rng, n):
    m = rng.uniform(-1, 1, (n, n))
    return m @ m.T + 0.1 * np.eye(n)


def batch_lqr_optimum(lin, weights, dx0):
    """Batch quadratic program over the open-loop perturbation sequence.

    Stacks the linear dynamics into one least-squares problem in the controls
    and solves the normal equations; independent of the Riccati recursion.
    """
    h = lin.horizon
    n_x = lin.a.shape[1]
    n_u = lin.b.shape[2]
    # dx_t = F_t dx0 + sum_s G[t, s] du_s
    f_mats = [np.eye(n_x)]
    for t in range(h):
        f_mats.append(lin.a[t] @ f_mats[-1])
    g = np.zeros((h + 1, h, n_x, n_u))
    for s in range(h):
        g[s + 1, s] = lin.b[s]
        for t in range(s + 1, h):
            g[t + 1, s] = lin.a[t] @ g[t, s]
    dim = h * n_u
    big_h = np.zeros((dim, dim))
    big_g = np.zeros(dim)
    const = 0.0
    for t in range(h + 1):
        q_t = weights.q_f if t == h else weights.q
        # g[t] is indexed (s, i, k); flatten controls time-major
        gt = (np.transpose(g[t], (1, 0, 2)).reshape(n_x, dim)
              if t > 0 else np.zeros((n_x, dim)))
        ft = f_mats[t] @ dx0
        big_h += gt.T @ q_t @ gt
        big_g += gt.T @ q_t @ ft
        const += ft @ q_t @ ft
    for t in range(h):
        sl = slice(t * n_u, (t + 1) * n_u)
        big_h[sl, sl] += weights.r
    du = scipy.linalg.solve(2 * big_h, -2 * big_g, assume_a="sym")
    return float(du @ big_h @ du + 2 * big_g @ du + const), du


def closed_loop_cost(lin, weights, sched, dx0):
    """Cost of rolling the linear system under the synthesized feedback."""
    dx = dx0.copy()
    total = 0.0
    for t in range(lin.horizon):
        du = -sched.gains[t] @ dx
        total += dx @ weights.q @ dx + du @ weights.r @ du
        dx = lin.a[t] @ dx + lin.b[t] @ du
    return total + float(dx @ weights.q_f @ dx)


class TestScalarHandCases:
    W = LQRWeights(q=np.eye(1), r=np.eye(1), q_f=np.eye(1))

    def test_horizon_one(self):
        lin = LinearizedSystem(a=np.ones((1, 1, 1)), b=np.ones((1, 1, 1)))
        sched = riccati_backward(lin, self.W)
        assert abs(sched.gains[0, 0, 0] - 0.5) < 1e-15
        assert abs(sched.riccati[0, 0, 0] - 1.5) < 1e-15

    def test_horizon_two(self):
        lin = LinearizedSystem(a=np.ones((2, 1, 1)), b=np.ones((2, 1, 1)))
        sched = riccati_backward(lin, self.W)
        assert abs(sched.gains[1, 0, 0] - 0.5) < 1e-15
        assert abs(sched.riccati[1, 0, 0] - 1.5) < 1e-15
        assert abs(sched.gains[0, 0, 0] - 0.6) < 1e-15
        assert abs(sched.riccati[0, 0, 0] - 1.6) < 1e-15


class TestRiccatiOptimality:
    def test_matches_batch_qp(self):
        rng = np.random.default_rng(20)
        for _ in range(10):
            lin = random_ltv(rng)
            weights = LQRWeights(q=random_psd(rng, 4), r=random_psd(rng, 2),
                                 q_f=random_psd(rng, 4))
            sched = riccati_backward(lin, weights)
            dx0 = rng.normal(size=4)
            qp_value, _ = batch_lqr_optimum(lin, weights, dx0)
            cl_value = closed_loop_cost(lin, weights, sched, dx0)
            assert abs(cl_value - qp_value) <= 1e-8 * max(1.0, abs(qp_value))

    def test_beats_random_open_loop(self):
        rng = np.random.default_rng(21)
        lin = random_ltv(rng)
        weights = LQRWeights(q=random_psd(rng, 4), r=random_psd(rng, 2),
                             q_f=random_psd(rng, 4))
        sched = riccati_backward(lin, weights)
        dx0 = rng.normal(size=4)
        cl_value = closed_loop_cost(lin, weights, sched, dx0)
        _, du_opt = batch_lqr_optimum(lin, weights, dx0)
        for _ in range(100):
            du = du_opt + rng.normal(scale=0.1, size=du_opt.shape)
            dx = dx0.copy()
            total = 0.0
            for t in range(lin.horizon):
                u = du[2 * t:2 * t + 2]
                total += dx @ weights.q @ dx + u @ weights.r @ u
                dx = lin.a[t] @ dx + lin.b[t] @ u
            total += dx @ weights.q_f @ dx
            assert cl_value <= total + 1e-9

    def test_residuals_of_printed_equations(self):
        rng = np.random.default_rng(22)
        lin = random_ltv(rng)
        weights = LQRWeights(q=random_psd(rng, 4), r=random_psd(rng, 2),
                             q_f=random_psd(rng, 4))
        sched = riccati_backward(lin, weights)
        assert np.array_equal(sched.riccati[-1], weights.q_f)
        for t in range(lin.horizon):
            a_t, b_t = lin.a[t], lin.b[t]
            p_next = sched.riccati[t + 1]
            gain_res = ((weights.r + b_t.T @ p_next @ b_t) @ sched.gains[t]
                        - b_t.T @ p_next @ a_t)
            ric_res = (a_t.T @ p_next @ a_t - a_t.T @ p_next @ b_t @ sched.gains[t]
                       + weights.q - sched.riccati[t])
            scale = max(1.0, float(np.max(np.abs(sched.riccati[t]))))
            assert np.max(np.abs(gain_res)) < 1e-10 * scale
            assert np.max(np.abs(ric_res)) < 1e-10 * scale

    def test_riccati_matrices_psd(self):
        rng = np.random.default_rng(23)
        lin = random_ltv(rng)
        weights = LQRWeights(q=random_psd(rng, 4), r=random_psd(rng, 2),
                             q_f=random_psd(rng, 4))
        sched = riccati_backward(lin, weights)
        for p in sched.riccati:
            assert np.allclose(p, p.T)
            assert np.min(np.linalg.eigvalsh(p)) >= -1e-10

    def test_certainty_equivalence(self):
        # the noise scale never enters the recursion: synthesizing twice from
        # the same linearization yields one identical schedule for every eps
        rng = np.random.default_rng(25)
        lin = random_ltv(rng)
        weights = LQRWeights(q=random_psd(rng, 4), r=random_psd(rng, 2),
                             q_f=random_psd(rng, 4))
        first = riccati_backward(lin, weights)
        second = riccati_backward(lin, weights)
        assert np.array_equal(first.gains, second.gains)
        assert np.array_equal(first.riccati, second.riccati)

    def test_gains_invariant_to_weight_scaling(self):
        rng = np.random.default_rng(24)
        lin = random_ltv(rng)
        weights = LQRWeights(q=random_psd(rng, 4), r=random_psd(rng, 2),
                             q_f=random_psd(rng, 4))
        scaled = LQRWeights(q=7.5 * weights.q, r=7.5 * weights.r, q_f=7.5 * weights.q_f)
        base = riccati_backward(lin, weights)
        up = riccati_backward(lin, scaled)
        np.testing.assert_allclose(up.gains, base.gains, rtol=1e-12, atol=1e-12)

    def test_rejects_indefinite_weights(self):
        with pytest.raises(ValueError):
            LQRWeights(q=np.eye(1), r=-np.eye(1), q_f=np.eye(1))
        with pytest.raises(ValueError):
            LQRWeights(q=-np.eye(1), r=np.eye(1), q_f=np.eye(1))


class TestLinearize:
    def test_matches_pointwise_jacobians(self):
        scenario = single_agent_scenario()
        plan = solve_ocp(scenario.make_problem(scenario.x0, 12))
        lin = linearize_along(plan, scenario.system)
        for t in range(12):
            a, b = jacobians(plan.states[t], plan.controls[t], scenario.system)
            assert np.array_equal(lin.a[t], a)
            assert np.array_equal(lin.b[t], b)

    def test_finite_difference_agreement(self):
        scenario = single_agent_scenario()
        plan = solve_ocp(scenario.make_problem(scenario.x0, 12))
        lin = linearize_along(plan, scenario.system)
        for t in (0, 5, 11):
            a_fd, b_fd = fd_jacobians(plan.states[t], plan.controls[t],
                                      scenario.system, h=1e-6)
            np.testing.assert_allclose(lin.a[t], a_fd, atol=1e-5)
            np.testing.assert_allclose(lin.b[t], b_fd, atol=1e-5)

    def test_stationary_nominal(self):
        scenario = single_agent_scenario()
        plan = solve_ocp(scenario.make_problem(scenario.goal, 5))
        lin = linearize_along(plan, scenario.system)
        for t in range(5):
            np.testing.assert_allclose(lin.a[t], np.eye(4))


class TestApplyFeedback:
    def test_zero_deviation(self):
        u = np.array([1.0, -0.5])
        gain = np.ones((2, 4))
        x = np.array([0.1, 0.2, 0.3, 0.4])
        assert np.array_equal(apply_feedback(u, gain, x, x), u)

    def test_zero_gain(self):
        u = np.array([1.0, -0.5])
        out = apply_feedback(u, np.zeros((2, 4)), np.ones(4), np.zeros(4))
        assert np.array_equal(out, u)

    def test_scalar_case(self):
        out = apply_feedback(np.array([1.0]), np.array([[0.5]]),
                             np.array([2.0]), np.array([0.0]))
        np.testing.assert_allclose(out, [0.0])


class TestDecoupledGains:
    def test_single_agent_reduces(self):
        scenario = single_agent_scenario()
        plan = solve_ocp(scenario.make_problem(scenario.x0, 10))
        direct = synthesize_gains(plan, scenario.system, scenario.lqr)
        per_agent = decoupled_gains(plan, scenario.system, scenario.lqr)
        assert len(per_agent) == 1
        np.testing.assert_allclose(per_agent[0].gains, direct.gains, atol=1e-14)

    def test_identical_agents_identical_schedules(self):
        scenario = three_agent_scenario()
        # identical nominal blocks: replicate one agent's state/control
        single = single_agent_scenario()
        plan1 = solve_ocp(single.make_problem(single.x0, 8))
        states = np.tile(plan1.states, (1, 3))
        controls = np.tile(plan1.controls, (1, 3))
        from stocplan.trajopt import NominalPlan
        joint_plan = NominalPlan(controls=controls, states=states,
                                 stage_costs=np.zeros(8), cost=0.0, converged=True,
                                 iterations=0, stationarity=0.0)
        schedules = decoupled_gains(joint_plan, scenario.system, scenario.lqr)
        for sched in schedules[1:]:
            np.testing.assert_allclose(sched.gains, schedules[0].gains, atol=1e-14)

    def test_joint_riccati_equivalence(self):
        scenario = three_agent_scenario()
        plan = solve_ocp(scenario.make_problem(scenario.x0, 10))
        schedules = decoupled_gains(plan, scenario.system, scenario.lqr)
        joint = assemble_joint_gains(schedules)
        # joint block-diagonal Riccati on the stacked system
        lin = linearize_along(plan, scenario.system)
        q = joint.riccati[-1] * 0.0
        for j in range(3):
            q[4 * j:4 * j + 4, 4 * j:4 * j + 4] = scenario.lqr.q
        qf = q * 0.0
        for j in range(3):
            qf[4 * j:4 * j + 4, 4 * j:4 * j + 4] = scenario.lqr.q_f
        r = np.zeros((6, 6))
        for j in range(3):
            r[2 * j:2 * j + 2, 2 * j:2 * j + 2] = scenario.lqr.r
        full = riccati_backward(lin, LQRWeights(q=q, r=r, q_f=qf))
        assert np.max(np.abs(full.riccati - joint.riccati)) < 1e-10
        assert np.max(np.abs(full.gains - joint.gains)) < 1e-10
        # off-diagonal blocks of the joint solution vanish
        for t in range(11):
            for i in range(3):
                for j in range(3):
                    if i != j:
                        block = full.riccati[t, 4 * i:4 * i + 4, 4 * j:4 * j + 4]
                        assert np.max(np.abs(block)) < 1e-10
