"""Decoupled stochastic motion planning for car-like robots.

Plan once, track with a time-varying LQR, replan only when the executed cost
drifts from the nominal: this package implements that decoupled family (T-LQR,
T-LQR2, short-horizon variants, and their multi-agent counterparts) together
with receding-horizon MPC baselines, seeded Monte Carlo benchmarking, and the
supporting trajectory optimizer.
"""

from .controllers import (
    ControllerConfig,
    ControllerKind,
    constrain,
    make_controller,
    replan_trigger,
)
from .costs import (
    CollisionPenaltyParams,
    CostWeights,
    collision_penalty,
    default_cost_weights,
    stage_cost,
    terminal_cost,
    trajectory_cost,
)
from .dynamics import (
    AgentSystem,
    CarParams,
    ControlLimits,
    NoiseModel,
    SteeringSingularityError,
    default_control_limits,
    fd_jacobians,
    jacobians,
    sample_noise,
    stack_agents,
    step_nominal,
    step_noisy,
    unstack_agents,
)
from .feedback import (
    GainSchedule,
    LinearizedSystem,
    LQRWeights,
    apply_feedback,
    assemble_joint_gains,
    decoupled_gains,
    linearize_along,
    riccati_backward,
    synthesize_gains,
)
from .scenario import Scenario, single_agent_scenario, three_agent_scenario
from .simulation import (
    DpCheckPoint,
    EpisodeSpec,
    MonteCarloSummary,
    RolloutRecord,
    SweepResult,
    TinyDpSystem,
    high_noise_dp_check,
    replay_states,
    run_episode,
    run_monte_carlo,
    step_noise,
    summarize,
    sweep,
    timing_profile,
)
from .trajopt import (
    NominalPlan,
    OCPProblem,
    SolverSettings,
    clamp_control,
    feasibility_violation,
    nominal_cost_prefix,
    project_box_rate,
    rollout_nominal,
    solve_ocp,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
