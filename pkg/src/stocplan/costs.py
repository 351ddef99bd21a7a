"""Quadratic stage/terminal costs about a goal state and the inter-agent collision penalty.

Stage cost: ``(x - x_g)' W_x (x - x_g) + u' W_u u``; terminal cost uses ``W_xf``.
Costs are charged on goal deviation so the same weights work for any goal pose.
Heading is an unwrapped real: no angle wrapping is applied (short horizons keep
this benign and it preserves smoothness for the optimizer).

The collision penalty for agents i < j is
``psi = scale * exp(-(||p_i - p_j||^2 - r_thresh^2))`` on planar positions; it is
applied to stage states only, never to the terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import N_STATES_PER_AGENT


def _check_symmetric_psd(mat: np.ndarray, name: str, positive_definite: bool = False) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    eigmin = float(np.min(np.linalg.eigvalsh(mat)))
    if positive_definite and eigmin <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    if not positive_definite and eigmin < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite")
    return mat


@dataclass(frozen=True)
class CostWeights:
    """Quadratic weights and the goal state they are charged against."""

    w_x: np.ndarray
    w_u: np.ndarray
    w_xf: np.ndarray
    x_goal: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "w_x", _check_symmetric_psd(self.w_x, "w_x"))
        object.__setattr__(self, "w_u", _check_symmetric_psd(self.w_u, "w_u", positive_definite=True))
        object.__setattr__(self, "w_xf", _check_symmetric_psd(self.w_xf, "w_xf"))
        goal = np.asarray(self.x_goal, dtype=float)
        if goal.shape != (self.w_x.shape[0],):
            raise ValueError("x_goal must match the state dimension of w_x")
        if not np.all(np.isfinite(goal)):
            raise ValueError("x_goal must be finite")
        object.__setattr__(self, "x_goal", goal)

    @property
    def n_x(self) -> int:
        return self.w_x.shape[0]

    @property
    def n_u(self) -> int:
        return self.w_u.shape[0]

    @classmethod
    def from_diagonals(cls, w_x_diag, w_u_diag, x_goal,
                       w_xf_diag=None, w_xf_scale: float = 100.0) -> "CostWeights":
        """Build diagonal weights; w_xf defaults to w_xf_scale * w_x."""
        w_x = np.diag(np.asarray(w_x_diag, dtype=float))
        w_u = np.diag(np.asarray(w_u_diag, dtype=float))
        if w_xf_diag is not None:
            w_xf = np.diag(np.asarray(w_xf_diag, dtype=float))
        else:
            w_xf = w_xf_scale * w_x
        return cls(w_x=w_x, w_u=w_u, w_xf=w_xf, x_goal=x_goal)

    def stacked(self, n_agents: int, x_goal_joint) -> "CostWeights":
        """Block-diagonal joint weights for n_agents identical agents."""
        def blkdiag(m: np.ndarray) -> np.ndarray:
            out = np.zeros((m.shape[0] * n_agents, m.shape[1] * n_agents))
            for j in range(n_agents):
                out[j * m.shape[0]:(j + 1) * m.shape[0],
                    j * m.shape[1]:(j + 1) * m.shape[1]] = m
            return out

        return CostWeights(
            w_x=blkdiag(self.w_x), w_u=blkdiag(self.w_u),
            w_xf=blkdiag(self.w_xf), x_goal=np.asarray(x_goal_joint, dtype=float),
        )


def default_cost_weights(x_goal) -> CostWeights:
    """diag(5, 5, 1, 0.1) state weight, identity control weight, terminal 100x."""
    return CostWeights.from_diagonals([5.0, 5.0, 1.0, 0.1], [1.0, 1.0], x_goal)


@dataclass(frozen=True)
class CollisionPenaltyParams:
    """Magnitude and distance threshold of the pairwise collision penalty."""

    scale: float = 100.0
    r_thresh: float = 0.5

    def __post_init__(self) -> None:
        if not (self.scale > 0.0):
            raise ValueError("scale must be positive")
        if not (self.r_thresh > 0.0):
            raise ValueError("r_thresh must be positive")


def stage_cost(x: np.ndarray, u: np.ndarray, weights: CostWeights) -> float:
    """(x - x_g)' W_x (x - x_g) + u' W_u u, always >= 0."""
    dx = np.asarray(x, dtype=float) - weights.x_goal
    u = np.asarray(u, dtype=float)
    return float(dx @ weights.w_x @ dx + u @ weights.w_u @ u)


def terminal_cost(x: np.ndarray, weights: CostWeights) -> float:
    """(x - x_g)' W_xf (x - x_g)."""
    dx = np.asarray(x, dtype=float) - weights.x_goal
    return float(dx @ weights.w_xf @ dx)


def agent_positions(x_joint: np.ndarray, n_agents: int) -> np.ndarray:
    """(n_agents, 2) array of planar positions from a stacked state."""
    xs = np.asarray(x_joint, dtype=float).reshape(n_agents, N_STATES_PER_AGENT)
    return xs[:, :2]


def collision_penalty(x_joint: np.ndarray, params: CollisionPenaltyParams,
                      n_agents: int) -> float:
    """Sum over unordered agent pairs of scale * exp(-(||p_i - p_j||^2 - r^2))."""
    if n_agents < 2:
        return 0.0
    pos = agent_positions(x_joint, n_agents)
    total = 0.0
    for i in range(n_agents):
        for j in range(i + 1, n_agents):
            d2 = float(np.sum((pos[i] - pos[j]) ** 2))
            total += params.scale * np.exp(-(d2 - params.r_thresh ** 2))
    return total


def collision_penalty_gradient(x_joint: np.ndarray, params: CollisionPenaltyParams,
                               n_agents: int) -> np.ndarray:
    """Gradient of collision_penalty with respect to the stacked state."""
    grad = np.zeros_like(np.asarray(x_joint, dtype=float))
    if n_agents < 2:
        return grad
    pos = agent_positions(x_joint, n_agents)
    for i in range(n_agents):
        for j in range(i + 1, n_agents):
            diff = pos[i] - pos[j]
            d2 = float(diff @ diff)
            coeff = -2.0 * params.scale * np.exp(-(d2 - params.r_thresh ** 2))
            grad[4 * i:4 * i + 2] += coeff * diff
            grad[4 * j:4 * j + 2] -= coeff * diff
    return grad


def collision_penalty_hessian(x_joint: np.ndarray, params: CollisionPenaltyParams,
                              n_agents: int) -> np.ndarray:
    """Exact Hessian of collision_penalty with respect to the stacked state."""
    n = np.asarray(x_joint, dtype=float).shape[0]
    hess = np.zeros((n, n))
    if n_agents < 2:
        return hess
    pos = agent_positions(x_joint, n_agents)
    eye2 = np.eye(2)
    for i in range(n_agents):
        for j in range(i + 1, n_agents):
            diff = pos[i] - pos[j]
            d2 = float(diff @ diff)
            e = params.scale * np.exp(-(d2 - params.r_thresh ** 2))
            # d^2/dp^2 of e(-(d^2 - r^2)) in the pair's relative coordinates
            block = e * (4.0 * np.outer(diff, diff) - 2.0 * eye2)
            ii, jj = slice(4 * i, 4 * i + 2), slice(4 * j, 4 * j + 2)
            hess[ii, ii] += block
            hess[jj, jj] += block
            hess[ii, jj] -= block
            hess[jj, ii] -= block
    return hess


def trajectory_cost(states, controls, weights: CostWeights,
                    collision: CollisionPenaltyParams | None = None,
                    n_agents: int = 1) -> float:
    """Total cost of a trajectory: stage sums (plus collision) plus terminal cost.

    states has length T+1, controls length T.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if states.shape[0] != controls.shape[0] + 1:
        raise ValueError(
            f"need len(states) == len(controls) + 1, got {states.shape[0]} and {controls.shape[0]}"
        )
    total = 0.0
    for t in range(controls.shape[0]):
        total += stage_cost(states[t], controls[t], weights)
        if collision is not None and n_agents >= 2:
            total += collision_penalty(states[t], collision, n_agents)
    return total + terminal_cost(states[-1], weights)
