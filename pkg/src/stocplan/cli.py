"""Command-line entry points: run experiments, regenerate reports, self-check.

Exit codes: 0 success, 1 configuration error, 2 partial failure (some episodes
failed), 3 total failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import reporting
from .config import ConfigError, ExperimentConfig, load_config
from .controllers import ControllerConfig, ControllerKind
from .dynamics import AgentSystem, fd_jacobians, jacobians
from .feedback import LinearizedSystem, LQRWeights, riccati_backward
from .scenario import single_agent_scenario
from .simulation import (
    EpisodeSpec,
    high_noise_dp_check,
    replay_states,
    run_episode,
    sweep,
)
from .trajopt import feasibility_violation, solve_ocp


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    changed = config
    if args.seed_base is not None:
        raw = dict(changed.raw)
        raw["monte_carlo"] = dict(raw["monte_carlo"], seed_base=args.seed_base)
        changed = replace(changed, seed_base=args.seed_base, raw=raw)
    if args.workers is not None:
        raw = dict(changed.raw)
        raw["monte_carlo"] = dict(raw["monte_carlo"], workers=args.workers)
        changed = replace(changed, workers=args.workers, raw=raw)
    if args.output is not None:
        raw = dict(changed.raw)
        raw["output"] = dict(raw["output"], directory=args.output)
        changed = replace(changed, output_dir=args.output, raw=raw)
    return changed


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        config = _apply_overrides(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    print(f"run: scenario={config.scenario.name} axis={config.sweep_axis} "
          f"grid={list(config.sweep_grid)} controllers="
          f"{[c.label for c in config.controllers]} N={config.episodes}")
    result = sweep(
        config.scenario, list(config.controllers), config.sweep_axis,
        list(config.sweep_grid), config.episodes, config.seed_base,
        base_epsilon=config.base_epsilon, workers=config.workers,
    )
    out = reporting.write_run(config, result)
    n_total = sum(s.n_episodes for s in result.summaries)
    n_failed = sum(s.n_failed for s in result.summaries)
    for s in result.summaries:
        print(f"  {s.controller_label} @ {s.grid_value:g}: "
              f"J/Jbar={s.mean_cost_ratio:.4f} replans={s.mean_replans:.2f} "
              f"plan_time={s.mean_planning_time:.3f}s fail={s.failure_rate:.2f}")
    print(f"artifacts: {out}")
    if n_failed == n_total:
        print("total failure: every episode failed", file=sys.stderr)
        return 3
    if n_failed > 0:
        print(f"partial failure: {n_failed}/{n_total} episodes failed", file=sys.stderr)
        return 2
    return 0


def cmd_report(args) -> int:
    try:
        report_dir = reporting.write_report(args.results)
    except FileNotFoundError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 1
    print(f"report series written to {report_dir}")
    return 0


def _check_jacobians() -> bool:
    rng = np.random.default_rng(0)
    system = AgentSystem.single()
    worst = 0.0
    for _ in range(200):
        x = rng.uniform([-2, -2, -np.pi, -1.2], [2, 2, np.pi, 1.2])
        u = rng.uniform(-2, 2, 2)
        a, b = jacobians(x, u, system)
        a_fd, b_fd = fd_jacobians(x, u, system)
        worst = max(worst, float(np.max(np.abs(a - a_fd))), float(np.max(np.abs(b - b_fd))))
    return worst < 1e-5


def _check_riccati() -> bool:
    lin = LinearizedSystem(a=np.ones((1, 1, 1)), b=np.ones((1, 1, 1)))
    w = LQRWeights(q=np.eye(1), r=np.eye(1), q_f=np.eye(1))
    sched = riccati_backward(lin, w)
    if not (abs(sched.gains[0, 0, 0] - 0.5) < 1e-12
            and abs(sched.riccati[0, 0, 0] - 1.5) < 1e-12):
        return False
    lin2 = LinearizedSystem(a=np.ones((2, 1, 1)), b=np.ones((2, 1, 1)))
    sched2 = riccati_backward(lin2, w)
    return (abs(sched2.gains[0, 0, 0] - 0.6) < 1e-12
            and abs(sched2.riccati[0, 0, 0] - 1.6) < 1e-12)


def _check_solver() -> bool:
    scenario = single_agent_scenario(horizon=20)
    plan = solve_ocp(scenario.make_problem(scenario.x0, scenario.horizon))
    feasible = feasibility_violation(plan.controls, scenario.stacked_limits,
                                     np.zeros(2)) <= 1e-6
    return plan.converged and feasible


def _check_replay() -> bool:
    scenario = single_agent_scenario(horizon=15)
    spec = EpisodeSpec(scenario, ControllerConfig(ControllerKind.TLQR), 0.2, 123)
    record = run_episode(spec)
    if record.failed:
        return False
    again = run_episode(spec)
    if not np.array_equal(record.states, again.states):
        return False
    return np.array_equal(replay_states(record, scenario), record.states)


def _check_dp() -> bool:
    points = high_noise_dp_check()
    agreements = [p.agreement for p in points]
    return (agreements[0] < 1.0 and agreements[-1] == 1.0
            and all(b >= a for a, b in zip(agreements, agreements[1:])))


def cmd_check(_args) -> int:
    checks = [
        ("analytic vs finite-difference jacobians", _check_jacobians),
        ("riccati recursion hand cases", _check_riccati),
        ("nominal solver convergence and feasibility", _check_solver),
        ("episode determinism and replay", _check_replay),
        ("high-noise greedy limit (exact DP)", _check_dp),
    ]
    failures = 0
    for name, fn in checks:
        ok = fn()
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 3


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="stocplan",
        description="Decoupled stochastic motion-planning benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="TOML experiment file")
    p_run.add_argument("--seed-base", type=int, default=None)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--output", type=str, default=None)
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="emit plot-ready series from a run directory")
    p_rep.add_argument("results", help="run directory written by 'run'")
    p_rep.set_defaults(func=cmd_report)

    p_chk = sub.add_parser("check", help="run the built-in verification suites")
    p_chk.set_defaults(func=cmd_check)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
