"""Seeded closed-loop episodes, Monte Carlo aggregation, and verification experiments.

Noise streams are counter-based: each step's draw comes from a Philox generator
keyed by ``(episode seed, step)``, so draws are order-independent, identical
across controllers sharing a seed, and replayable for any subset of steps.
Episode seeds are ``seed_base + episode_index``; the same bank is reused at
every grid point of a sweep, which makes controller comparisons paired and
trends across the grid common-random-number smooth.

Wall-clock planning times are recorded per step but never influence control
flow; every other field of a rollout record is a pure function of
(scenario, controller, epsilon, seed).
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from . import costs as costs_mod
from .controllers import ControllerConfig, make_controller
from .dynamics import SteeringSingularityError, sample_noise, step_noisy
from .scenario import Scenario


@dataclass(frozen=True)
class EpisodeSpec:
    """One closed-loop run: scenario, controller, noise scale, and seed.

    ``noise_sign`` flips the whole noise stream; antithetic +-pairs cancel the
    first-order cost perturbation exactly and are used by mean-cost scaling
    studies as a variance-reduction device.
    """

    scenario: Scenario
    controller: ControllerConfig
    epsilon: float
    seed: int
    noise_sign: float = 1.0

    def __post_init__(self) -> None:
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if self.noise_sign not in (1.0, -1.0):
            raise ValueError("noise_sign must be +1 or -1")

    @property
    def horizon(self) -> int:
        return self.scenario.horizon


def step_noise(seed: int, t: int, model) -> np.ndarray:
    """Actuator-noise draw for step t of an episode, from a (seed, t)-keyed stream."""
    key = np.array([seed, t], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return sample_noise(rng, model)


@dataclass(frozen=True)
class RolloutRecord:
    """Everything logged during one episode.

    ``planning_times`` is wall-clock instrumentation and is excluded from the
    determinism/replay contract; all other fields are reproducible bitwise from
    (scenario, controller, epsilon, seed).
    """

    controller_label: str
    epsilon: float
    seed: int
    states: np.ndarray           # (T+1, n_x), truncated on failure
    controls: np.ndarray         # (T, n_u)
    noise: np.ndarray            # (T, n_u)
    stage_costs: np.ndarray      # (T,)
    total_cost: float
    nominal_cost: float          # full-horizon OCP cost from x0 (normalizer)
    cost_ratio: float
    replan_steps: tuple[int, ...]
    plan_calls: int
    planning_times: np.ndarray   # (T,)
    nonconverged_calls: int
    degenerate_events: int
    min_pair_distance: float     # nan for single agent
    failed: bool = False
    failure_step: int | None = None

    @property
    def n_replans(self) -> int:
        return len(self.replan_steps)

    @property
    def total_planning_time(self) -> float:
        return float(np.sum(self.planning_times))


def _min_pair_distance(states: np.ndarray, n_agents: int) -> float:
    if n_agents < 2:
        return float("nan")
    best = np.inf
    for t in range(states.shape[0]):
        pos = states[t].reshape(n_agents, 4)[:, :2]
        for i in range(n_agents):
            for j in range(i + 1, n_agents):
                best = min(best, float(np.linalg.norm(pos[i] - pos[j])))
    return best


def run_episode(spec: EpisodeSpec) -> RolloutRecord:
    """Execute one closed-loop episode: control, constrain, noise, step, log.

    A steering-singularity guard violation ends the episode early with a
    failure flag; it is recorded, not raised.
    """
    scenario = spec.scenario
    system = scenario.system
    t_total = scenario.horizon
    model = scenario.noise_model(spec.epsilon)
    controller = make_controller(scenario, spec.controller)

    states = np.full((t_total + 1, system.n_x), np.nan)
    controls = np.full((t_total, system.n_u), np.nan)
    noise = np.full((t_total, system.n_u), np.nan)
    plan_times = np.zeros(t_total)
    replan_steps: list[int] = []
    plan_calls = 0
    degenerate = 0

    states[0] = scenario.x0
    x = scenario.x0
    failed = False
    failure_step = None
    steps_done = 0
    for t in range(t_total):
        try:
            result = controller.step(t, x)
            w = spec.noise_sign * step_noise(spec.seed, t, model)
            x_next = step_noisy(x, result.control, w, spec.epsilon, system)
        except SteeringSingularityError:
            failed = True
            failure_step = t
            break
        controls[t] = result.control
        noise[t] = w
        plan_times[t] = result.planning_time
        if result.planned:
            plan_calls += 1
            if t > 0:
                replan_steps.append(t)
        if result.degenerate_baseline:
            degenerate += 1
        states[t + 1] = x_next
        x = x_next
        steps_done = t + 1

    nominal = scenario.full_horizon_plan().cost
    if failed or steps_done < t_total:
        failed = True
        total = float("nan")
        ratio = float("nan")
        stage = np.full(t_total, np.nan)
    else:
        stage = np.empty(t_total)
        for t in range(t_total):
            c = costs_mod.stage_cost(states[t], controls[t], scenario.weights)
            if scenario.collision is not None and system.n_agents >= 2:
                c += costs_mod.collision_penalty(states[t], scenario.collision,
                                                 system.n_agents)
            stage[t] = c
        total = costs_mod.trajectory_cost(states, controls, scenario.weights,
                                          scenario.collision, system.n_agents)
        ratio = total / nominal if nominal > 1e-12 else float("nan")

    nonconv = getattr(controller, "nonconverged_calls", 0)
    return RolloutRecord(
        controller_label=spec.controller.label,
        epsilon=spec.epsilon,
        seed=spec.seed,
        states=states,
        controls=controls,
        noise=noise,
        stage_costs=stage,
        total_cost=total,
        nominal_cost=nominal,
        cost_ratio=ratio,
        replan_steps=tuple(replan_steps),
        plan_calls=plan_calls,
        planning_times=plan_times,
        nonconverged_calls=nonconv,
        degenerate_events=degenerate,
        min_pair_distance=_min_pair_distance(states[:steps_done + 1], system.n_agents),
        failed=failed,
        failure_step=failure_step,
    )


def replay_states(record: RolloutRecord, scenario: Scenario) -> np.ndarray:
    """Re-simulate the episode's states from its logged controls and noise."""
    t_steps = record.controls.shape[0]
    out = np.empty_like(record.states)
    out[0] = scenario.x0
    for t in range(t_steps):
        out[t + 1] = step_noisy(out[t], record.controls[t], record.noise[t],
                                record.epsilon, scenario.system)
    return out


@dataclass(frozen=True)
class MonteCarloSummary:
    """Statistics over N seeded episodes of one (controller, grid point)."""

    controller_label: str
    epsilon: float
    grid_value: float
    n_episodes: int
    n_failed: int
    mean_cost: float
    mean_cost_ratio: float
    var_cost_ratio: float
    nominal_cost: float
    mean_replans: float
    mean_plan_calls: float
    mean_planning_time: float
    total_planning_time: float
    nonconvergence_rate: float
    failure_rate: float
    mean_min_pair_distance: float
    records: tuple[RolloutRecord, ...] = field(repr=False)


def summarize(records: list[RolloutRecord], grid_value: float | None = None) -> MonteCarloSummary:
    """Aggregate per-episode records; statistics use non-failed episodes."""
    if not records:
        raise ValueError("no records to summarize")
    ok = [r for r in records if not r.failed]
    n = len(records)
    ratios = np.array([r.cost_ratio for r in ok]) if ok else np.array([np.nan])
    costs = np.array([r.total_cost for r in ok]) if ok else np.array([np.nan])
    dists = np.array([r.min_pair_distance for r in ok]) if ok else np.array([np.nan])
    var = float(np.var(ratios, ddof=1)) if len(ok) >= 2 else 0.0
    return MonteCarloSummary(
        controller_label=records[0].controller_label,
        epsilon=records[0].epsilon,
        grid_value=records[0].epsilon if grid_value is None else grid_value,
        n_episodes=n,
        n_failed=n - len(ok),
        mean_cost=float(np.mean(costs)),
        mean_cost_ratio=float(np.mean(ratios)),
        var_cost_ratio=var,
        nominal_cost=records[0].nominal_cost,
        mean_replans=float(np.mean([r.n_replans for r in records])),
        mean_plan_calls=float(np.mean([r.plan_calls for r in records])),
        mean_planning_time=float(np.mean([r.total_planning_time for r in records])),
        total_planning_time=float(np.sum([r.total_planning_time for r in records])),
        nonconvergence_rate=float(np.mean([r.nonconverged_calls > 0 for r in records])),
        failure_rate=float((n - len(ok)) / n),
        mean_min_pair_distance=float(np.mean(dists)) if np.any(np.isfinite(dists)) else float("nan"),
        records=tuple(records),
    )


def run_monte_carlo(scenario: Scenario, controller: ControllerConfig, epsilon: float,
                    n_episodes: int, seed_base: int, workers: int = 1,
                    grid_value: float | None = None) -> MonteCarloSummary:
    """N independent episodes with seeds seed_base + 0..N-1."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    scenario.full_horizon_plan()  # warm the shared normalizer before dispatch
    specs = [EpisodeSpec(scenario, controller, epsilon, seed_base + i)
             for i in range(n_episodes)]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            records = pool.map(run_episode, specs)
    else:
        records = [run_episode(s) for s in specs]
    return summarize(records, grid_value=grid_value)


SWEEP_AXES = ("epsilon", "threshold", "horizon")


@dataclass(frozen=True)
class SweepResult:
    """Summaries for every (controller, grid value) pair of one sweep."""

    axis: str
    grid: tuple[float, ...]
    summaries: tuple[MonteCarloSummary, ...]

    def for_controller(self, label: str) -> list[MonteCarloSummary]:
        return [s for s in self.summaries if s.controller_label == label]


def _controller_at(config: ControllerConfig, axis: str, value: float) -> ControllerConfig:
    if axis == "threshold" and config.j_thresh is not None:
        return ControllerConfig(kind=config.kind, control_horizon=config.control_horizon,
                                j_thresh=float(value))
    if axis == "horizon" and config.control_horizon is not None:
        return ControllerConfig(kind=config.kind, control_horizon=int(value),
                                j_thresh=config.j_thresh)
    return config


def sweep(scenario: Scenario, controllers: list[ControllerConfig], axis: str,
          grid, n_episodes: int, seed_base: int, base_epsilon: float = 0.1,
          workers: int = 1) -> SweepResult:
    """One Monte Carlo summary per (controller, grid point).

    The epsilon axis varies the noise scale; the threshold axis varies j_thresh
    of triggered controllers; the horizon axis varies the control horizon of
    short-horizon controllers.  All controllers at one grid point consume the
    identical noise streams (paired comparison).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid must be nonempty")
    summaries = []
    for value in grid:
        epsilon = float(value) if axis == "epsilon" else base_epsilon
        for config in controllers:
            cfg = _controller_at(config, axis, value)
            summaries.append(run_monte_carlo(
                scenario, cfg, epsilon, n_episodes, seed_base,
                workers=workers, grid_value=float(value)))
    return SweepResult(axis=axis, grid=tuple(float(v) for v in grid),
                       summaries=tuple(summaries))


def timing_profile(records: list[RolloutRecord]) -> tuple[np.ndarray, float]:
    """Mean planning time per step across records, and their summed total."""
    if not records:
        raise ValueError("no records")
    times = np.vstack([r.planning_times for r in records])
    per_step = times.mean(axis=0)
    return per_step, float(times.sum())


# ---------------------------------------------------------------------------
# High-noise sanity experiment: exact DP versus the greedy policy on a tiny
# discrete system whose next-state distribution becomes action-independent in
# the fully swamped limit.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TinyDpSystem:
    """1-D gridworld with an action cost now and a distant low-cost basin later.

    The greedy policy (minimize the immediate stage cost alone) never moves:
    the state term does not depend on the action and moving costs
    ``action_cost * |u|``.  The optimal policy pays to travel toward the basin
    when enough horizon remains, so greedy and DP disagree without noise.
    """

    n_cells: int = 121
    max_action: int = 4
    horizon: int = 8
    action_cost: float = 0.05
    basin_center: int = 95
    basin_width: float = 8.0
    basin_depth: float = 1.0

    def __post_init__(self) -> None:
        if self.n_cells > 10_000:
            raise ValueError("state grid too large for exact DP (limit 10^4 cells)")
        if 2 * self.max_action + 1 > 9:
            raise ValueError("at most 9 actions are allowed")
        if self.horizon > 10:
            raise ValueError("horizon too long for the desk-scale DP check")

    @property
    def actions(self) -> np.ndarray:
        return np.arange(-self.max_action, self.max_action + 1)

    def state_cost(self) -> np.ndarray:
        i = np.arange(self.n_cells, dtype=float)
        return self.basin_depth * (
            1.0 - np.exp(-((i - self.basin_center) ** 2) / (2.0 * self.basin_width ** 2))
        )


@dataclass(frozen=True)
class DpCheckPoint:
    swamp: float
    agreement: float        # fraction of states where greedy == DP-optimal at t=0
    greedy_cost_gap: float  # mean relative cost-to-go excess of the greedy policy


def high_noise_dp_check(system: TinyDpSystem | None = None,
                        swamp_grid=(0.0, 0.25, 0.5, 0.75, 1.0)) -> list[DpCheckPoint]:
    """Exact backward DP versus the greedy policy across the swamping sweep.

    With swamping ratio s the next state follows the intended transition with
    probability 1-s and an action-independent wide distribution with
    probability s; at s=1 the cost-to-go term is a constant offset in the
    minimization, making the greedy action exactly optimal.
    """
    sys_ = system if system is not None else TinyDpSystem()
    n = sys_.n_cells
    actions = sys_.actions
    cx = sys_.state_cost()
    idx = np.arange(n)
    # destination index per (action, state) under the intended transition
    dest = np.clip(idx[None, :] + actions[:, None], 0, n - 1)
    stage = cx[None, :] + sys_.action_cost * np.abs(actions)[:, None]  # (A, n)
    greedy_idx = np.argmin(stage, axis=0)                              # (n,)
    greedy_actions = actions[greedy_idx]

    points = []
    for s in swamp_grid:
        s = float(s)
        value = cx.copy()          # terminal cost-to-go J_T = cx
        value_greedy = cx.copy()
        policy0 = None
        for _ in range(sys_.horizon):
            spread = float(np.mean(value))
            q = stage + (1.0 - s) * value[dest] + s * spread            # (A, n)
            best = np.argmin(q, axis=0)
            policy0 = actions[best]
            value = q[best, idx]
            spread_g = float(np.mean(value_greedy))
            value_greedy = (stage[greedy_idx, idx]
                            + (1.0 - s) * value_greedy[dest[greedy_idx, idx]]
                            + s * spread_g)
        agreement = float(np.mean(policy0 == greedy_actions))
        gap = float(np.mean((value_greedy - value) / np.maximum(np.abs(value), 1e-12)))
        points.append(DpCheckPoint(swamp=s, agreement=agreement, greedy_cost_gap=gap))
    return points
