#!/usr/bin/env python3
"""Where the planning time goes: per-step effort of MPC versus T-LQR2.

Runs paired episodes at a moderate noise level and prints the per-step mean
planning time of each controller.  MPC pays a solve at every step (shrinking
as the horizon runs out); the event-triggered tracker pays once up front and
then only at trigger firings.
"""

from stocplan import (
    ControllerConfig,
    ControllerKind,
    run_monte_carlo,
    single_agent_scenario,
    timing_profile,
)

scenario = single_agent_scenario()
epsilon, n = 0.4, 8

profiles = {}
for config in (ControllerConfig(ControllerKind.MPC),
               ControllerConfig(ControllerKind.TLQR2, j_thresh=0.02)):
    summary = run_monte_carlo(scenario, config, epsilon, n, seed_base=2000)
    per_step, total = timing_profile(list(summary.records))
    profiles[config.label] = (per_step, total)
    print(f"{config.label}: total planning {total:.2f}s over {n} episodes, "
          f"mean replans {summary.mean_replans:.1f}")

print(f"\n{'step':>4s} " + " ".join(f"{label:>12s}" for label in profiles))
for t in range(scenario.horizon):
    cells = " ".join(f"{profiles[label][0][t] * 1e3:11.2f}m" for label in profiles)
    print(f"{t:4d} {cells}")

mpc_total = profiles["mpc"][1]
tracker_total = profiles["tlqr2-th0.02"][1]
print(f"\nplanning-effort ratio (tracker / receding horizon): "
      f"{tracker_total / mpc_total:.2f}")
