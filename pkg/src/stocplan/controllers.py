"""Online control policies: receding-horizon re-solving and nominal tracking.

Five controller kinds cover the single- and multi-agent benchmark family:

* ``MPC``      -- re-solve the deterministic OCP over the full remaining horizon
                  at every step, apply the first control.
* ``MPC_SH``   -- same, but over a short control horizon H_c.
* ``TLQR``     -- one nominal plan plus a time-varying LQR tracker, no replanning.
* ``TLQR2``    -- TLQR with event-triggered replanning once the executed running
                  cost deviates from the active plan's nominal running cost by
                  more than ``j_thresh`` (fractional).
* ``TLQR2_SH`` -- TLQR2 planning only H_c steps ahead; replans when triggered or
                  when the short plan runs out.

On a stacked multi-agent scenario the same classes realize the joint-MPC,
MT-LQR and MT-LQR2 variants: the nominal plan is solved jointly (collision
penalty included) while tracking gains are synthesized per agent, so between
replans each agent's control depends on its own state block only.  The replan
trigger is evaluated on the joint cost with centralized information, standing
in for a distributed detection mechanism.

Controls are constrained (box, then rate) before noise is injected by the
simulation layer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import costs as costs_mod
from .feedback import (
    GainSchedule,
    apply_feedback,
    assemble_joint_gains,
    decoupled_gains,
)
from .scenario import Scenario
from .trajopt import (
    NominalPlan,
    clamp_control,
    nominal_cost_prefix,
    solve_ocp,
)

# running nominal costs below this are treated as degenerate trigger baselines
BASELINE_FLOOR = 1e-9


class ControllerKind(str, Enum):
    MPC = "mpc"
    MPC_SH = "mpc_sh"
    TLQR = "tlqr"
    TLQR2 = "tlqr2"
    TLQR2_SH = "tlqr2_sh"


_SHORT_HORIZON_KINDS = {ControllerKind.MPC_SH, ControllerKind.TLQR2_SH}
_TRIGGERED_KINDS = {ControllerKind.TLQR2, ControllerKind.TLQR2_SH}


@dataclass(frozen=True)
class ControllerConfig:
    """Kind plus the short-horizon / replan-threshold knobs it needs."""

    kind: ControllerKind
    control_horizon: int | None = None
    j_thresh: float | None = None

    def __post_init__(self) -> None:
        kind = ControllerKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in _SHORT_HORIZON_KINDS:
            if self.control_horizon is None or self.control_horizon < 1:
                raise ValueError(f"{kind.value} requires control_horizon >= 1")
        elif self.control_horizon is not None:
            raise ValueError(f"{kind.value} does not take a control horizon")
        if kind in _TRIGGERED_KINDS:
            if self.j_thresh is None or self.j_thresh < 0.0:
                raise ValueError(f"{kind.value} requires j_thresh >= 0")
        elif self.j_thresh is not None:
            raise ValueError(f"{kind.value} does not take a replan threshold")

    @property
    def label(self) -> str:
        parts = [self.kind.value]
        if self.control_horizon is not None:
            parts.append(f"h{self.control_horizon}")
        if self.j_thresh is not None:
            parts.append(f"th{self.j_thresh:g}")
        return "-".join(parts)


@dataclass(frozen=True)
class StepResult:
    """Outcome of one controller step."""

    control: np.ndarray
    planning_time: float      # seconds spent in solve_ocp + gain synthesis
    planned: bool             # a plan was computed at this step
    solver_converged: bool    # False once any solve in this episode failed to converge
    degenerate_baseline: bool = False


def replan_trigger(j_actual: float, j_nominal: float, j_thresh: float) -> bool:
    """True iff the running-cost deviation (J_t - Jbar_t)/Jbar_t exceeds j_thresh.

    A nominal baseline at or below the floor cannot be divided by; the trigger
    then reports False and the caller logs a degenerate-baseline event.
    """
    if j_nominal <= BASELINE_FLOOR:
        return False
    return (j_actual - j_nominal) / j_nominal > j_thresh


def constrain(u: np.ndarray, u_prev: np.ndarray, limits) -> np.ndarray:
    """Enforce box limits, then the rate limit against the previously applied control."""
    return clamp_control(u, u_prev, limits)


def _shifted_guess(tail: np.ndarray, horizon: int) -> np.ndarray | None:
    """Warm start from the unused remainder of the previous solution."""
    if tail.shape[0] == 0:
        return None
    if tail.shape[0] >= horizon:
        return tail[:horizon].copy()
    pad = np.tile(tail[-1], (horizon - tail.shape[0], 1))
    return np.vstack([tail, pad])


class _ControllerBase:
    """Shared scenario plumbing: problem construction, timing, convergence flags."""

    def __init__(self, scenario: Scenario, config: ControllerConfig):
        self.scenario = scenario
        self.config = config
        self.limits = scenario.stacked_limits
        self.u_prev = np.zeros(scenario.system.n_u)
        self.all_converged = True
        self.plan_calls = 0
        self.nonconverged_calls = 0

    def _solve(self, x: np.ndarray, horizon: int, guess: np.ndarray | None,
               truncated: bool = False) -> tuple[NominalPlan, float]:
        problem = self.scenario.make_problem(x, horizon, u_init=self.u_prev,
                                             truncated=truncated)
        start = time.perf_counter()
        plan = solve_ocp(problem, guess, self.scenario.solver)
        elapsed = time.perf_counter() - start
        self.plan_calls += 1
        if not plan.converged:
            self.all_converged = False
            self.nonconverged_calls += 1
        return plan, elapsed

    def step(self, t: int, x: np.ndarray) -> StepResult:
        raise NotImplementedError


class RecedingHorizonController(_ControllerBase):
    """MPC / MPC-SH: solve, apply the first control, keep the tail as a warm start."""

    def __init__(self, scenario: Scenario, config: ControllerConfig):
        super().__init__(scenario, config)
        self._tail: np.ndarray | None = None

    def step(self, t: int, x: np.ndarray) -> StepResult:
        remaining = self.scenario.horizon - t
        if remaining < 1:
            raise ValueError(f"step {t} beyond horizon {self.scenario.horizon}")
        horizon = remaining
        if self.config.control_horizon is not None:
            horizon = min(self.config.control_horizon, remaining)
        guess = None
        if self._tail is not None:
            guess = _shifted_guess(self._tail, horizon)
        plan, elapsed = self._solve(x, horizon, guess, truncated=horizon < remaining)
        u = constrain(plan.controls[0], self.u_prev, self.limits)
        self._tail = plan.controls[1:]
        self.u_prev = u
        return StepResult(control=u, planning_time=elapsed, planned=True,
                          solver_converged=self.all_converged)


class TrackingController(_ControllerBase):
    """TLQR / TLQR2 / TLQR2-SH: track a nominal plan with time-varying LQR gains.

    Gains are synthesized per agent over the plan's whole horizon at every
    (re)plan; for stacked scenarios they form an exactly block-diagonal joint
    schedule (spatial decoupling).  Running costs J_t and Jbar_t restart at each
    replan and accumulate relative to the active plan.
    """

    def __init__(self, scenario: Scenario, config: ControllerConfig):
        super().__init__(scenario, config)
        self.plan: NominalPlan | None = None
        self.gains: GainSchedule | None = None
        self.plan_start = 0
        self.j_actual = 0.0
        self.degenerate_events = 0

    def _plan_from(self, x: np.ndarray, t: int, guess: np.ndarray | None) -> float:
        remaining = self.scenario.horizon - t
        horizon = remaining
        if self.config.control_horizon is not None:
            horizon = min(self.config.control_horizon, remaining)
        plan, elapsed = self._solve(x, horizon, guess, truncated=horizon < remaining)
        start = time.perf_counter()
        schedules = decoupled_gains(plan, self.scenario.system, self.scenario.lqr)
        self.gains = assemble_joint_gains(schedules)
        elapsed += time.perf_counter() - start
        self.plan = plan
        self.plan_start = t
        self.j_actual = 0.0
        return elapsed

    def _should_replan(self, rel_prev: int) -> tuple[bool, bool]:
        """(replan?, degenerate-baseline event?) given costs through rel_prev."""
        if self.config.kind not in _TRIGGERED_KINDS:
            return False, False
        if rel_prev + 1 >= self.plan.horizon:
            # short plan exhausted; the nominal simply runs out
            return True, False
        if self.config.j_thresh == 0.0:
            # threshold zero replans unconditionally: the documented reduction
            # of the triggered tracker to receding-horizon control
            return True, False
        j_nominal = nominal_cost_prefix(self.plan, rel_prev)
        fired = replan_trigger(self.j_actual, j_nominal, self.config.j_thresh)
        degenerate = j_nominal <= BASELINE_FLOOR and self.j_actual > j_nominal
        return fired, degenerate

    def step(self, t: int, x: np.ndarray) -> StepResult:
        if t >= self.scenario.horizon:
            raise ValueError(f"step {t} beyond horizon {self.scenario.horizon}")
        planning_time = 0.0
        planned = False
        degenerate = False
        if t == 0 or self.plan is None:
            planning_time = self._plan_from(x, t, None)
            planned = True
        else:
            rel_prev = t - 1 - self.plan_start
            fire, degenerate = self._should_replan(rel_prev)
            if degenerate:
                self.degenerate_events += 1
            if fire:
                tail = self.plan.controls[t - self.plan_start:]
                remaining = self.scenario.horizon - t
                horizon = remaining
                if self.config.control_horizon is not None:
                    horizon = min(self.config.control_horizon, remaining)
                planning_time = self._plan_from(x, t, _shifted_guess(tail, horizon))
                planned = True
        rel = t - self.plan_start
        u_raw = apply_feedback(self.plan.controls[rel], self.gains.gains[rel],
                               x, self.plan.states[rel])
        u = constrain(u_raw, self.u_prev, self.limits)
        stage = costs_mod.stage_cost(x, u, self.scenario.weights)
        if self.scenario.collision is not None and self.scenario.system.n_agents >= 2:
            stage += costs_mod.collision_penalty(
                x, self.scenario.collision, self.scenario.system.n_agents)
        self.j_actual += stage
        self.u_prev = u
        return StepResult(control=u, planning_time=planning_time, planned=planned,
                          solver_converged=self.all_converged,
                          degenerate_baseline=degenerate)


def make_controller(scenario: Scenario, config: ControllerConfig) -> _ControllerBase:
    """Instantiate the controller for a (possibly multi-agent) scenario.

    This is the single entry point for both single-agent and joint controllers;
    with several agents it yields the MT-LQR / MT-LQR2 / joint-MPC behavior.
    """
    if config.kind in (ControllerKind.MPC, ControllerKind.MPC_SH):
        return RecedingHorizonController(scenario, config)
    return TrackingController(scenario, config)
