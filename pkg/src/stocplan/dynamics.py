"""Discrete-time car-like robot dynamics, stacked multi-agent systems, and actuator noise.

The single-agent state is ``(x, y, theta, phi)``: planar position [m], heading [rad]
and steering angle [rad].  Controls are ``(v, omega)``: linear velocity [m/s] and
steering rate [rad/s].  The discrete update is control-affine,

    x_{t+1} = f(x_t) + B(x_t) u_t,      f(x) = x,
    B(x)    = dt * [[cos(theta), 0],
                    [sin(theta), 0],
                    [tan(phi)/L, 0],
                    [0,          1]].

Multi-agent systems stack M identical blocks agent-major; cross-agent coupling is
exactly zero (transition independence).  Actuator noise enters through the control
channel only: ``x_{t+1} = f(x_t) + B(x_t)(u_t + eps * w_t)`` with
``w_t = u_max * nu``, ``nu ~ N(0, I)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_STATES_PER_AGENT = 4
N_CONTROLS_PER_AGENT = 2

# tan(phi) blows up at pi/2; the model is rejected before that point.
PHI_SINGULARITY_GUARD = np.pi / 2.0 - 1e-3


class SteeringSingularityError(ValueError):
    """Raised when a steering angle reaches the tan() singularity guard."""


def _as_vector(value, length: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (length,):
        raise ValueError(f"{name} must have shape ({length},), got {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class CarParams:
    """Kinematic car parameters: wheelbase L [m] and time step dt [s]."""

    wheelbase: float = 0.5
    dt: float = 0.1

    def __post_init__(self) -> None:
        if not (self.wheelbase > 0.0 and np.isfinite(self.wheelbase)):
            raise ValueError("wheelbase must be positive")
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class ControlLimits:
    """Box bounds and per-step rate bounds on a control vector."""

    u_min: np.ndarray
    u_max: np.ndarray
    du_max: np.ndarray

    def __post_init__(self) -> None:
        n = np.asarray(self.u_min).shape[0]
        object.__setattr__(self, "u_min", _as_vector(self.u_min, n, "u_min"))
        object.__setattr__(self, "u_max", _as_vector(self.u_max, n, "u_max"))
        object.__setattr__(self, "du_max", _as_vector(self.du_max, n, "du_max"))
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be elementwise below u_max")
        if not np.all(self.du_max > 0.0):
            raise ValueError("du_max must be elementwise positive")

    @property
    def n_u(self) -> int:
        return self.u_min.shape[0]

    def stacked(self, n_agents: int) -> "ControlLimits":
        """Limits of the agent-major stacked control vector."""
        return ControlLimits(
            u_min=np.tile(self.u_min, n_agents),
            u_max=np.tile(self.u_max, n_agents),
            du_max=np.tile(self.du_max, n_agents),
        )


def default_control_limits() -> ControlLimits:
    """v, omega in [-2, 2] with per-step rate bound (1, 1)."""
    return ControlLimits(
        u_min=np.array([-2.0, -2.0]),
        u_max=np.array([2.0, 2.0]),
        du_max=np.array([1.0, 1.0]),
    )


@dataclass(frozen=True)
class NoiseModel:
    """Actuator noise ``w = u_max * (L_sigma nu)`` with ``nu ~ N(0, I)``.

    The scale ``epsilon`` multiplies w at the dynamics step, not here, so one
    noise stream can be replayed across epsilon values.
    """

    epsilon: float
    u_max_ref: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (self.epsilon >= 0.0 and np.isfinite(self.epsilon)):
            raise ValueError("epsilon must be a finite nonnegative scale")
        n = np.asarray(self.u_max_ref).shape[0]
        object.__setattr__(self, "u_max_ref", _as_vector(self.u_max_ref, n, "u_max_ref"))
        if self.sigma is not None:
            sig = np.asarray(self.sigma, dtype=float)
            if sig.shape != (n, n):
                raise ValueError(f"sigma must have shape ({n}, {n})")
            if not np.allclose(sig, sig.T, atol=1e-12):
                raise ValueError("sigma must be symmetric")
            if np.min(np.linalg.eigvalsh(sig)) < -1e-10:
                raise ValueError("sigma must be positive semidefinite")
            object.__setattr__(self, "sigma", sig)

    def sigma_factor(self) -> np.ndarray | None:
        """Lower-triangular factor of sigma, or None for the identity default."""
        if self.sigma is None:
            return None
        # eigen-based square root tolerates semidefinite sigma
        w, v = np.linalg.eigh(self.sigma)
        return v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


@dataclass(frozen=True)
class AgentSystem:
    """A stack of M transition-independent car-like agents.

    All agents share the time step; wheelbases may differ per agent.
    """

    cars: tuple[CarParams, ...]
    limits: ControlLimits = field(default_factory=default_control_limits)

    def __post_init__(self) -> None:
        if len(self.cars) < 1:
            raise ValueError("at least one agent is required")
        dts = {c.dt for c in self.cars}
        if len(dts) != 1:
            raise ValueError("all agents must share the same time step")
        if self.limits.n_u != N_CONTROLS_PER_AGENT:
            raise ValueError("limits are per-agent (2 controls)")

    @classmethod
    def single(cls, car: CarParams | None = None,
               limits: ControlLimits | None = None) -> "AgentSystem":
        return cls.identical(1, car, limits)

    @classmethod
    def identical(cls, n_agents: int, car: CarParams | None = None,
                  limits: ControlLimits | None = None) -> "AgentSystem":
        car = car if car is not None else CarParams()
        limits = limits if limits is not None else default_control_limits()
        return cls(cars=tuple(car for _ in range(n_agents)), limits=limits)

    @property
    def n_agents(self) -> int:
        return len(self.cars)

    @property
    def n_x(self) -> int:
        return N_STATES_PER_AGENT * self.n_agents

    @property
    def n_u(self) -> int:
        return N_CONTROLS_PER_AGENT * self.n_agents

    @property
    def dt(self) -> float:
        return self.cars[0].dt

    @property
    def wheelbases(self) -> np.ndarray:
        return np.array([c.wheelbase for c in self.cars])

    def stacked_limits(self) -> ControlLimits:
        return self.limits.stacked(self.n_agents)


def _validate_state_control(x: np.ndarray, u: np.ndarray, system: AgentSystem) -> None:
    if x.shape != (system.n_x,):
        raise ValueError(f"state must have shape ({system.n_x},), got {x.shape}")
    if u.shape != (system.n_u,):
        raise ValueError(f"control must have shape ({system.n_u},), got {u.shape}")
    _check_finite(x, "state")
    _check_finite(u, "control")
    phi = x.reshape(system.n_agents, N_STATES_PER_AGENT)[:, 3]
    if np.any(np.abs(phi) >= PHI_SINGULARITY_GUARD):
        raise SteeringSingularityError(
            f"steering angle |phi| >= {PHI_SINGULARITY_GUARD:.6f} rad"
        )


def control_matrix(x: np.ndarray, system: AgentSystem) -> np.ndarray:
    """Control-affine input matrix B(x) of the stacked system, shape (n_x, n_u)."""
    x = np.asarray(x, dtype=float)
    m = system.n_agents
    xs = x.reshape(m, N_STATES_PER_AGENT)
    theta, phi = xs[:, 2], xs[:, 3]
    dt = system.dt
    b = np.zeros((system.n_x, system.n_u))
    for j in range(m):
        r, c = 4 * j, 2 * j
        b[r + 0, c + 0] = dt * np.cos(theta[j])
        b[r + 1, c + 0] = dt * np.sin(theta[j])
        b[r + 2, c + 0] = dt * np.tan(phi[j]) / system.wheelbases[j]
        b[r + 3, c + 1] = dt
    return b


def step_nominal(x: np.ndarray, u: np.ndarray, system: AgentSystem) -> np.ndarray:
    """Noise-free discrete update ``f(x) + B(x) u`` of the stacked system."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _validate_state_control(x, u, system)
    m = system.n_agents
    xs = x.reshape(m, N_STATES_PER_AGENT)
    us = u.reshape(m, N_CONTROLS_PER_AGENT)
    theta, phi = xs[:, 2], xs[:, 3]
    v, omega = us[:, 0], us[:, 1]
    dt = system.dt
    out = xs.copy()
    out[:, 0] += v * np.cos(theta) * dt
    out[:, 1] += v * np.sin(theta) * dt
    out[:, 2] += v * np.tan(phi) / system.wheelbases * dt
    out[:, 3] += omega * dt
    return out.reshape(-1)


def step_noisy(x: np.ndarray, u: np.ndarray, w: np.ndarray, epsilon: float,
               system: AgentSystem) -> np.ndarray:
    """Noisy update ``f(x) + B(x)(u + epsilon w)``.

    The caller constrains u before this point; noise is added afterwards and may
    push the effective control outside the limits.
    """
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.shape != u.shape:
        raise ValueError("noise vector must match control shape")
    return step_nominal(x, u + epsilon * w, system)


def sample_noise(rng: np.random.Generator, model: NoiseModel) -> np.ndarray:
    """Draw one actuator-noise vector ``w = u_max * nu`` (epsilon not applied)."""
    nu = rng.standard_normal(model.u_max_ref.shape[0])
    factor = model.sigma_factor()
    if factor is not None:
        nu = factor @ nu
    return model.u_max_ref * nu


def jacobians(x: np.ndarray, u: np.ndarray,
              system: AgentSystem) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (A, B) of step_nominal at (x, u).

    A is block diagonal with one 4x4 block per agent; cross-agent blocks are
    exactly zero by transition independence.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _validate_state_control(x, u, system)
    m = system.n_agents
    xs = x.reshape(m, N_STATES_PER_AGENT)
    us = u.reshape(m, N_CONTROLS_PER_AGENT)
    theta, phi = xs[:, 2], xs[:, 3]
    v = us[:, 0]
    dt = system.dt
    a = np.zeros((system.n_x, system.n_x))
    for j in range(m):
        r = 4 * j
        blk = np.eye(N_STATES_PER_AGENT)
        blk[0, 2] = -dt * v[j] * np.sin(theta[j])
        blk[1, 2] = dt * v[j] * np.cos(theta[j])
        blk[2, 3] = dt * v[j] / (system.wheelbases[j] * np.cos(phi[j]) ** 2)
        a[r:r + 4, r:r + 4] = blk
    return a, control_matrix(x, system)


def fd_jacobians(x: np.ndarray, u: np.ndarray, system: AgentSystem,
                 h: float = 1e-6, f=None) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of the discrete update (verification oracle).

    ``f(x, u) -> x_next`` may be injected to differentiate an arbitrary map; by
    default it is step_nominal on the given system.
    """
    if h <= 0.0:
        raise ValueError("step size h must be positive")
    if f is None:
        f = lambda xx, uu: step_nominal(xx, uu, system)  # noqa: E731
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n_x, n_u = x.shape[0], u.shape[0]
    a = np.zeros((n_x, n_x))
    b = np.zeros((n_x, n_u))
    for i in range(n_x):
        dx = np.zeros(n_x)
        dx[i] = h
        a[:, i] = (f(x + dx, u) - f(x - dx, u)) / (2.0 * h)
    for i in range(n_u):
        du = np.zeros(n_u)
        du[i] = h
        b[:, i] = (f(x, u + du) - f(x, u - du)) / (2.0 * h)
    return a, b


def stack_agents(vectors: list[np.ndarray] | tuple[np.ndarray, ...]) -> np.ndarray:
    """Concatenate per-agent vectors agent-major."""
    if len(vectors) == 0:
        raise ValueError("nothing to stack")
    sizes = {np.asarray(v).shape for v in vectors}
    if len(sizes) != 1:
        raise ValueError("per-agent vectors must share one shape")
    return np.concatenate([np.asarray(v, dtype=float) for v in vectors])


def unstack_agents(stacked: np.ndarray, n_agents: int) -> list[np.ndarray]:
    """Split a stacked vector into n_agents equal per-agent pieces."""
    stacked = np.asarray(stacked, dtype=float)
    if n_agents < 1 or stacked.shape[0] % n_agents != 0:
        raise ValueError(
            f"cannot split length {stacked.shape[0]} into {n_agents} agents"
        )
    per = stacked.shape[0] // n_agents
    return [stacked[j * per:(j + 1) * per].copy() for j in range(n_agents)]
