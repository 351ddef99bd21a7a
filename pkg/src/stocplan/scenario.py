"""Scenario definitions: system, endpoints, horizon, weights, and solver settings.

A Scenario bundles everything that stays fixed across episodes of one
experiment.  Per-agent cost matrices are stored once and expanded to
block-diagonal joint weights for stacked systems; the tracking-LQR weights
default to the same matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import CollisionPenaltyParams, CostWeights
from .dynamics import AgentSystem, CarParams, ControlLimits, NoiseModel
from .feedback import LQRWeights
from .trajopt import (
    DEFAULT_PHI_MAX,
    NominalPlan,
    OCPProblem,
    SolverSettings,
    solve_ocp,
)


@dataclass
class Scenario:
    """One benchmark setup: fixed start/goal, horizon, weights, and solver knobs."""

    system: AgentSystem
    x0: np.ndarray
    goal: np.ndarray
    horizon: int
    w_x: np.ndarray                       # per-agent state weight (4x4)
    w_u: np.ndarray                       # per-agent control weight (2x2)
    w_xf: np.ndarray                      # per-agent terminal weight (4x4)
    collision: CollisionPenaltyParams | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    phi_max: float | None = DEFAULT_PHI_MAX
    lqr: LQRWeights | None = None         # per-agent; defaults to the cost weights
    noise_sigma: np.ndarray | None = None
    # terminal weight of horizon-truncated (short-horizon) plans: "terminal"
    # keeps the full arrival weight at the cut (goal attraction for greedy short
    # plans), "stage" keeps only the running state weight
    truncated_terminal: str = "terminal"
    name: str = "scenario"

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if self.x0.shape != (self.system.n_x,):
            raise ValueError(f"x0 must have shape ({self.system.n_x},)")
        if self.goal.shape != (self.system.n_x,):
            raise ValueError(f"goal must have shape ({self.system.n_x},)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.system.n_agents >= 2 and self.collision is None:
            self.collision = CollisionPenaltyParams()
        if self.lqr is None:
            self.lqr = LQRWeights(q=self.w_x, r=self.w_u, q_f=self.w_xf)
        if self.truncated_terminal not in ("stage", "terminal"):
            raise ValueError("truncated_terminal must be 'stage' or 'terminal'")
        self._weights_cache: CostWeights | None = None
        self._weights_trunc_cache: CostWeights | None = None
        self._limits_cache: ControlLimits | None = None
        self._nominal_cache: NominalPlan | None = None

    @property
    def weights(self) -> CostWeights:
        """Joint (block-diagonal) cost weights charged against the goal."""
        if self._weights_cache is None:
            if self.system.n_agents == 1:
                self._weights_cache = CostWeights(
                    w_x=self.w_x, w_u=self.w_u, w_xf=self.w_xf, x_goal=self.goal)
            else:
                per_agent = CostWeights(w_x=self.w_x, w_u=self.w_u, w_xf=self.w_xf,
                                        x_goal=np.zeros(4))
                self._weights_cache = per_agent.stacked(self.system.n_agents, self.goal)
        return self._weights_cache

    @property
    def stacked_limits(self) -> ControlLimits:
        if self._limits_cache is None:
            self._limits_cache = self.system.stacked_limits()
        return self._limits_cache

    def make_problem(self, x: np.ndarray, horizon: int,
                     u_init: np.ndarray | None = None,
                     truncated: bool = False) -> OCPProblem:
        weights = self.weights
        if truncated and self.truncated_terminal == "stage":
            if self._weights_trunc_cache is None:
                self._weights_trunc_cache = CostWeights(
                    w_x=weights.w_x, w_u=weights.w_u, w_xf=weights.w_x,
                    x_goal=weights.x_goal)
            weights = self._weights_trunc_cache
        return OCPProblem(
            x0=x, horizon=horizon, weights=weights,
            limits=self.stacked_limits, system=self.system, u_init=u_init,
            collision=self.collision, phi_max=self.phi_max,
        )

    def full_horizon_plan(self) -> NominalPlan:
        """Deterministic OCP solution from x0 over the total horizon.

        Computed once per scenario; its cost is the normalizer Jbar of the
        reported cost ratios, for every controller alike.
        """
        if self._nominal_cache is None:
            self._nominal_cache = solve_ocp(self.make_problem(self.x0, self.horizon))
        return self._nominal_cache

    def noise_model(self, epsilon: float) -> NoiseModel:
        return NoiseModel(epsilon=epsilon, u_max_ref=self.stacked_limits.u_max,
                          sigma=self.noise_sigma)


def single_agent_scenario(horizon: int = 35,
                          goal=(1.2, 0.3, 0.0, 0.0),
                          solver: SolverSettings | None = None) -> Scenario:
    """Point-to-point single-car task used throughout the single-agent studies.

    The default goal is a gentle S-curve whose optimal plan keeps every control
    and the steering angle strictly inside the limits, so the small-noise
    expansion regime is not distorted by saturation.
    """
    return Scenario(
        system=AgentSystem.single(CarParams(wheelbase=0.5, dt=0.1)),
        x0=np.zeros(4),
        goal=np.asarray(goal, dtype=float),
        horizon=horizon,
        w_x=np.diag([5.0, 5.0, 1.0, 0.1]),
        w_u=np.diag([1.0, 1.0]),
        w_xf=100.0 * np.diag([5.0, 5.0, 1.0, 0.1]),
        solver=solver if solver is not None else SolverSettings(),
        name="single_agent",
    )


def three_agent_scenario(horizon: int = 35,
                         solver: SolverSettings | None = None) -> Scenario:
    """Labelled point-to-point dispersal for three cars with interacting paths.

    The agents start clustered on a small triangle (close enough that the
    collision penalty is active from the first step) and swirl outward to
    assigned goals rotated 60 degrees around a wider circle, so the early paths
    shear past each other before separating.  Goals cannot be exchanged.
    """
    r0, r1, swirl = 0.7, 2.4, np.pi / 3.0
    starts, goals = [], []
    for j in range(3):
        a0 = np.pi / 2.0 + j * 2.0 * np.pi / 3.0
        a1 = a0 + swirl
        p0 = np.array([r0 * np.cos(a0), r0 * np.sin(a0)])
        p1 = np.array([r1 * np.cos(a1), r1 * np.sin(a1)])
        heading = np.arctan2(p1[1] - p0[1], p1[0] - p0[0])
        starts.append(np.array([p0[0], p0[1], heading, 0.0]))
        goals.append(np.array([p1[0], p1[1], heading, 0.0]))
    return Scenario(
        system=AgentSystem.identical(3, CarParams(wheelbase=0.5, dt=0.1)),
        x0=np.concatenate(starts),
        goal=np.concatenate(goals),
        horizon=horizon,
        w_x=np.diag([5.0, 5.0, 1.0, 0.1]),
        w_u=np.diag([1.0, 1.0]),
        w_xf=100.0 * np.diag([5.0, 5.0, 1.0, 0.1]),
        collision=CollisionPenaltyParams(scale=100.0, r_thresh=0.5),
        solver=solver if solver is not None else SolverSettings(),
        name="three_agent",
    )
