"""Nominal-plan solver: feasibility, local optimality, warm starts, determinism."""

import numpy as np
import pytest

from stocplan.dynamics import AgentSystem, CarParams, ControlLimits
from stocplan.scenario import Scenario, single_agent_scenario
from stocplan.trajopt import (
    OCPProblem,
    SolverSettings,
    clamp_control_sequence,
    feasibility_violation,
    nominal_cost_prefix,
    project_box_rate,
    rollout_nominal,
    solve_ocp,
)
from stocplan.costs import trajectory_cost


@pytest.fixture(scope="module")
def scenario():
    return single_agent_scenario()


@pytest.fixture(scope="module")
def plan(scenario):
    return solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon))


class TestSolveBasics:
    def test_goal_start_gives_zero_plan(self, scenario):
        problem = scenario.make_problem(scenario.goal, 10)
        plan = solve_ocp(problem)
        assert plan.cost == 0.0
        assert np.all(plan.controls == 0.0)
        assert plan.converged

    def test_converges(self, plan):
        assert plan.converged
        assert plan.stationarity < 1e-5

    def test_resimulation_exact(self, scenario, plan):
        states = rollout_nominal(scenario.x0, plan.controls, scenario.system)
        assert np.array_equal(states, plan.states)

    def test_cost_is_trajectory_cost(self, scenario, plan):
        recomputed = trajectory_cost(plan.states, plan.controls, scenario.weights)
        assert abs(recomputed - plan.cost) < 1e-9

    def test_feasible_to_tolerance(self, scenario, plan):
        viol = feasibility_violation(plan.controls, scenario.stacked_limits,
                                     np.zeros(2))
        assert viol <= 1e-6

    def test_determinism_bitwise(self, scenario, plan):
        again = solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon))
        assert np.array_equal(plan.controls, again.controls)
        assert np.array_equal(plan.states, again.states)
        assert plan.cost == again.cost


class TestStraightAhead:
    def test_no_steering_and_monotone_progress(self):
        scenario = single_agent_scenario(goal=(1.5, 0.0, 0.0, 0.0))
        plan = solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon))
        assert plan.converged
        assert np.max(np.abs(plan.controls[:, 1])) < 1e-3
        assert np.all(np.diff(plan.states[:, 0]) >= -1e-12)

    def test_beats_constant_control_grid(self):
        # coarse grid search over constant-speed straight plans as a cost bound
        scenario = single_agent_scenario(goal=(1.5, 0.0, 0.0, 0.0))
        plan = solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon))
        limits = scenario.stacked_limits
        for v in np.linspace(0.0, 2.0, 41):
            controls = clamp_control_sequence(
                np.tile([v, 0.0], (scenario.horizon, 1)), limits, np.zeros(2))
            states = rollout_nominal(scenario.x0, controls, scenario.system)
            cost = trajectory_cost(states, controls, scenario.weights)
            assert plan.cost <= cost + 1e-9


class TestLocalOptimalityProbe:
    def test_single_coordinate_perturbations(self, scenario, plan):
        limits = scenario.stacked_limits
        u_init = np.zeros(2)
        delta = 1e-3
        h = plan.horizon
        for t in range(h):
            for k in range(2):
                for sign in (+1.0, -1.0):
                    trial = plan.controls.copy()
                    trial[t, k] += sign * delta
                    # project the single moved coordinate back into the
                    # feasible interval defined by its neighbors
                    lo = limits.u_min[k]
                    hi = limits.u_max[k]
                    prev = u_init[k] if t == 0 else trial[t - 1, k]
                    lo = max(lo, prev - limits.du_max[k])
                    hi = min(hi, prev + limits.du_max[k])
                    if t + 1 < h:
                        lo = max(lo, trial[t + 1, k] - limits.du_max[k])
                        hi = min(hi, trial[t + 1, k] + limits.du_max[k])
                    trial[t, k] = np.clip(trial[t, k], lo, hi)
                    states = rollout_nominal(scenario.x0, trial, scenario.system)
                    cost = trajectory_cost(states, trial, scenario.weights)
                    assert cost >= plan.cost - 1e-6


class TestWarmStart:
    def test_resolve_is_immediate(self, scenario, plan):
        again = solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon),
                          guess=plan.controls)
        assert again.iterations <= 2
        assert abs(again.cost - plan.cost) < 1e-8

    def test_infeasible_guess_projected(self, scenario):
        guess = np.full((scenario.horizon, 2), 10.0)
        plan = solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon), guess)
        assert plan.guess_projected
        assert feasibility_violation(plan.controls, scenario.stacked_limits,
                                     np.zeros(2)) <= 1e-6

    def test_iteration_budget_flags_nonconvergence(self, scenario):
        settings = SolverSettings(max_iters=2)
        plan = solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon),
                         settings=settings)
        assert not plan.converged
        # best feasible iterate still returned
        assert feasibility_violation(plan.controls, scenario.stacked_limits,
                                     np.zeros(2)) <= 1e-6


class TestMultiAgentReduction:
    def test_joint_equals_concatenated_singles(self):
        # two agents, no collision term, block-diagonal weights: the joint
        # problem separates exactly
        system = AgentSystem.identical(2, CarParams())
        x0 = np.array([0.0, 0.0, 0.0, 0.0, 3.0, 1.0, 0.5, 0.0])
        goal = np.array([1.0, 0.3, 0.0, 0.0, 3.8, 1.8, 0.5, 0.0])
        joint = Scenario(system=system, x0=x0, goal=goal, horizon=20,
                         w_x=np.diag([5.0, 5.0, 1.0, 0.1]), w_u=np.eye(2),
                         w_xf=100 * np.diag([5.0, 5.0, 1.0, 0.1]),
                         collision=None, name="pair")
        joint.collision = None  # defeat the multi-agent default
        plan = solve_ocp(joint.make_problem(x0, 20))
        assert plan.converged
        singles = []
        for j in range(2):
            sub = Scenario(system=AgentSystem.single(CarParams()),
                           x0=x0[4 * j:4 * j + 4], goal=goal[4 * j:4 * j + 4],
                           horizon=20, w_x=np.diag([5.0, 5.0, 1.0, 0.1]),
                           w_u=np.eye(2), w_xf=100 * np.diag([5.0, 5.0, 1.0, 0.1]),
                           name="solo")
            singles.append(solve_ocp(sub.make_problem(sub.x0, 20)))
        stacked = np.hstack([s.controls for s in singles])
        assert np.max(np.abs(plan.controls - stacked)) < 1e-6


class TestRolloutNominal:
    def test_zero_controls_constant(self):
        system = AgentSystem.single()
        states = rollout_nominal(np.zeros(4), np.zeros((5, 2)), system)
        assert np.all(states == 0.0)

    def test_single_step(self):
        system = AgentSystem.single()
        states = rollout_nominal(np.zeros(4), np.array([[1.0, 0.0]]), system)
        np.testing.assert_allclose(states[1], [0.1, 0, 0, 0])

    def test_matches_loop_oracle(self):
        from stocplan.dynamics import step_nominal
        system = AgentSystem.single()
        rng = np.random.default_rng(10)
        controls = rng.uniform(-1, 1, (12, 2))
        states = rollout_nominal(np.zeros(4), controls, system)
        x = np.zeros(4)
        for t in range(12):
            x = step_nominal(x, controls[t], system)
            assert np.array_equal(states[t + 1], x)


class TestCostPrefix:
    def test_first_and_full(self, plan):
        assert nominal_cost_prefix(plan, 0) == float(plan.stage_costs[0])
        np.testing.assert_allclose(nominal_cost_prefix(plan, plan.horizon), plan.cost)

    def test_midpoint_matches_direct_sum(self, plan):
        t = plan.horizon // 2
        direct = 0.0
        for s in range(t + 1):
            direct += float(plan.stage_costs[s])
        assert nominal_cost_prefix(plan, t) == direct

    def test_out_of_range(self, plan):
        with pytest.raises(IndexError):
            nominal_cost_prefix(plan, -1)
        with pytest.raises(IndexError):
            nominal_cost_prefix(plan, plan.horizon + 1)


class TestProjection:
    def make_limits(self):
        return ControlLimits(u_min=np.array([-2.0, -2.0]),
                             u_max=np.array([2.0, 2.0]),
                             du_max=np.array([1.0, 1.0]))

    def test_identity_on_feasible(self):
        limits = self.make_limits()
        rng = np.random.default_rng(11)
        seq = clamp_control_sequence(rng.uniform(-2, 2, (10, 2)), limits, np.zeros(2))
        out = project_box_rate(seq, limits, np.zeros(2))
        assert np.array_equal(out, seq)

    def test_result_feasible_and_idempotent(self):
        limits = self.make_limits()
        rng = np.random.default_rng(12)
        seq = rng.uniform(-6, 6, (15, 2))
        out = project_box_rate(seq, limits, np.zeros(2))
        assert feasibility_violation(out, limits, np.zeros(2)) <= 1e-10
        again = project_box_rate(out, limits, np.zeros(2))
        assert np.max(np.abs(again - out)) <= 1e-10

    def test_matches_qp_oracle(self):
        import scipy.optimize as so
        limits = self.make_limits()
        u_init = np.zeros(2)
        rng = np.random.default_rng(13)
        target = rng.uniform(-4, 4, (8, 2))
        proj = project_box_rate(target, limits, u_init)

        def objective(z):
            return 0.5 * np.sum((z.reshape(8, 2) - target) ** 2)

        cons = []
        for t in range(8):
            for k in range(2):
                def upper(z, t=t, k=k):
                    z = z.reshape(8, 2)
                    prev = u_init[k] if t == 0 else z[t - 1, k]
                    return limits.du_max[k] - (z[t, k] - prev)

                def lower(z, t=t, k=k):
                    z = z.reshape(8, 2)
                    prev = u_init[k] if t == 0 else z[t - 1, k]
                    return limits.du_max[k] + (z[t, k] - prev)

                cons.append({"type": "ineq", "fun": upper})
                cons.append({"type": "ineq", "fun": lower})
        bounds = [(-2.0, 2.0)] * 16
        ref = so.minimize(objective, np.zeros(16), bounds=bounds, constraints=cons,
                          method="SLSQP", options={"maxiter": 500, "ftol": 1e-14})
        assert np.max(np.abs(proj.reshape(-1) - ref.x)) < 1e-6


class TestProblemValidation:
    def test_rejects_bad_horizon(self, scenario):
        with pytest.raises(ValueError):
            OCPProblem(x0=scenario.x0, horizon=0, weights=scenario.weights,
                       limits=scenario.stacked_limits, system=scenario.system)

    def test_rejects_out_of_box_u_init(self, scenario):
        with pytest.raises(ValueError):
            OCPProblem(x0=scenario.x0, horizon=5, weights=scenario.weights,
                       limits=scenario.stacked_limits, system=scenario.system,
                       u_init=np.array([5.0, 0.0]))

    def test_rejects_bad_guess_shape(self, scenario):
        with pytest.raises(ValueError):
            solve_ocp(scenario.make_problem(scenario.x0, 5), guess=np.zeros((4, 2)))
