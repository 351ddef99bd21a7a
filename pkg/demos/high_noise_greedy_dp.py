#!/usr/bin/env python3
"""When noise swamps the dynamics, the greedy action becomes optimal.

Exact backward dynamic programming on a tiny 1-D gridworld with a delayed
reward: the optimal policy pays an action cost now to reach a low-cost basin
later, while the greedy policy never moves.  As the next-state distribution is
mixed toward an action-independent one, the two policies coincide.
"""

from stocplan import TinyDpSystem, high_noise_dp_check

system = TinyDpSystem()
print(f"gridworld: {system.n_cells} cells, actions -{system.max_action}.."
      f"+{system.max_action}, horizon {system.horizon}")
print(f"{'swamping':>9s} {'greedy = DP-optimal':>20s} {'greedy cost excess':>19s}")
for point in high_noise_dp_check(system):
    print(f"{point.swamp:9.2f} {100 * point.agreement:19.1f}% "
          f"{100 * point.greedy_cost_gap:18.2f}%")

print("\nfully swamped (ratio 1): the expected cost-to-go is the same constant")
print("for every action, so minimizing the immediate cost is exactly optimal.")
