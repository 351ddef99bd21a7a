"""Time-varying LQR tracking policies synthesized around a nominal plan.

The system is linearized along the nominal trajectory and the feedback gains
come from the finite-horizon discrete Riccati recursion,

    L_t = (R + B_t' P_{t+1} B_t)^{-1} B_t' P_{t+1} A_t,
    P_t = A_t' P_{t+1} A_t - A_t' P_{t+1} B_t L_t + Q,       P_H = Q_f,

applied backward from the terminal weight.  The tracking control is
``u_t = ubar_t - L_t (x_t - xbar_t)``.

For stacked multi-agent systems the dynamics and weights are block diagonal, so
the joint Riccati solution decouples: per-agent gains computed independently
coincide with the diagonal blocks of the joint solution, and the off-diagonal
blocks vanish.  ``decoupled_gains`` exploits this directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .costs import CostWeights
from .dynamics import (
    N_CONTROLS_PER_AGENT,
    N_STATES_PER_AGENT,
    AgentSystem,
    jacobians,
)
from .trajopt import NominalPlan


@dataclass(frozen=True)
class LQRWeights:
    """Quadratic weights of the surrogate tracking problem: Q, Q_f PSD and R PD."""

    q: np.ndarray
    r: np.ndarray
    q_f: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        q_f = np.asarray(self.q_f, dtype=float)
        for name, mat in (("q", q), ("r", r), ("q_f", q_f)):
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise ValueError(f"{name} must be symmetric")
        if float(np.min(np.linalg.eigvalsh(q))) < -1e-10:
            raise ValueError("q must be positive semidefinite")
        if float(np.min(np.linalg.eigvalsh(q_f))) < -1e-10:
            raise ValueError("q_f must be positive semidefinite")
        if float(np.min(np.linalg.eigvalsh(r))) <= 0.0:
            raise ValueError("r must be positive definite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "q_f", q_f)

    @classmethod
    def from_cost_weights(cls, weights: CostWeights) -> "LQRWeights":
        """Reuse the OCP weights: Q = W_x, R = W_u, Q_f = W_xf."""
        return cls(q=weights.w_x, r=weights.w_u, q_f=weights.w_xf)


@dataclass(frozen=True)
class LinearizedSystem:
    """Jacobian sequences A_{0:H-1}, B_{0:H-1} along a nominal trajectory."""

    a: np.ndarray  # (H, n_x, n_x)
    b: np.ndarray  # (H, n_x, n_u)

    @property
    def horizon(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class GainSchedule:
    """Feedback gains L_{0:H-1} and Riccati matrices P_{0:H}."""

    gains: np.ndarray    # (H, n_u, n_x)
    riccati: np.ndarray  # (H+1, n_x, n_x)

    @property
    def horizon(self) -> int:
        return self.gains.shape[0]


def linearize_along(plan: NominalPlan, system: AgentSystem) -> LinearizedSystem:
    """Jacobians of the discrete dynamics at every nominal (state, control) pair."""
    h = plan.horizon
    a = np.empty((h, system.n_x, system.n_x))
    b = np.empty((h, system.n_x, system.n_u))
    for t in range(h):
        a[t], b[t] = jacobians(plan.states[t], plan.controls[t], system)
    return LinearizedSystem(a=a, b=b)


def riccati_backward(lin: LinearizedSystem, weights: LQRWeights) -> GainSchedule:
    """Backward Riccati sweep from P_H = Q_f; P_t is symmetrized at every step."""
    h = lin.horizon
    n_x = lin.a.shape[1]
    n_u = lin.b.shape[2]
    gains = np.empty((h, n_u, n_x))
    riccati = np.empty((h + 1, n_x, n_x))
    riccati[h] = weights.q_f
    for t in range(h - 1, -1, -1):
        a_t, b_t = lin.a[t], lin.b[t]
        p_next = riccati[t + 1]
        gram = weights.r + b_t.T @ p_next @ b_t
        gram = 0.5 * (gram + gram.T)
        try:
            cho = scipy.linalg.cho_factor(gram, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise ValueError(
                "R + B' P B is not positive definite; check the weight invariants"
            ) from exc
        l_t = scipy.linalg.cho_solve(cho, b_t.T @ p_next @ a_t)
        p_t = a_t.T @ p_next @ a_t - a_t.T @ p_next @ b_t @ l_t + weights.q
        riccati[t] = 0.5 * (p_t + p_t.T)
        gains[t] = l_t
    return GainSchedule(gains=gains, riccati=riccati)


def apply_feedback(u_nominal: np.ndarray, gain: np.ndarray, x: np.ndarray,
                   x_nominal: np.ndarray) -> np.ndarray:
    """Tracking control ``ubar - L (x - xbar)``; constraint clamping is the caller's job."""
    return u_nominal - gain @ (np.asarray(x, dtype=float) - x_nominal)


def synthesize_gains(plan: NominalPlan, system: AgentSystem,
                     weights: LQRWeights) -> GainSchedule:
    """Linearize along the plan and run the Riccati recursion over its horizon."""
    return riccati_backward(linearize_along(plan, system), weights)


def decoupled_gains(plan: NominalPlan, system: AgentSystem,
                    agent_weights: LQRWeights | list[LQRWeights]) -> list[GainSchedule]:
    """Per-agent gain schedules for a joint plan of transition-independent agents.

    Each agent's Riccati recursion runs on its own 4-dimensional block; the
    result equals the diagonal blocks of the joint block-diagonal solution.
    """
    m = system.n_agents
    if isinstance(agent_weights, LQRWeights):
        agent_weights = [agent_weights] * m
    if len(agent_weights) != m:
        raise ValueError(f"need one LQRWeights per agent, got {len(agent_weights)}")
    h = plan.horizon
    schedules = []
    for j in range(m):
        sx = slice(N_STATES_PER_AGENT * j, N_STATES_PER_AGENT * (j + 1))
        su = slice(N_CONTROLS_PER_AGENT * j, N_CONTROLS_PER_AGENT * (j + 1))
        sub = AgentSystem.single(system.cars[j], system.limits)
        a = np.empty((h, N_STATES_PER_AGENT, N_STATES_PER_AGENT))
        b = np.empty((h, N_STATES_PER_AGENT, N_CONTROLS_PER_AGENT))
        for t in range(h):
            a[t], b[t] = jacobians(plan.states[t, sx], plan.controls[t, su], sub)
        schedules.append(riccati_backward(LinearizedSystem(a=a, b=b), agent_weights[j]))
    return schedules


def assemble_joint_gains(schedules: list[GainSchedule]) -> GainSchedule:
    """Block-diagonal joint schedule from per-agent schedules (exact zeros off-diagonal)."""
    m = len(schedules)
    h = schedules[0].horizon
    n_u = N_CONTROLS_PER_AGENT
    n_x = N_STATES_PER_AGENT
    gains = np.zeros((h, n_u * m, n_x * m))
    riccati = np.zeros((h + 1, n_x * m, n_x * m))
    for j, sched in enumerate(schedules):
        if sched.horizon != h:
            raise ValueError("all agent schedules must share one horizon")
        gains[:, j * n_u:(j + 1) * n_u, j * n_x:(j + 1) * n_x] = sched.gains
        riccati[:, j * n_x:(j + 1) * n_x, j * n_x:(j + 1) * n_x] = sched.riccati
    return GainSchedule(gains=gains, riccati=riccati)
