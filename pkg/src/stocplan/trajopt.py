"""Deterministic optimal-control solver for the nominal (open-loop) planning problem.

min over u_{0:H-1} of  sum_t [stage(x_t, u_t) + collision(x_t)] + terminal(x_H)
  s.t.  x_{t+1} = f(x_t) + B(x_t) u_t
        u_min <= u_t <= u_max            (box)
        |u_t - u_{t-1}| <= du_max        (rate; t = 0 anchored at u_init)
        |phi_t| <= phi_max               (steering-angle state box)

The problem is condensed onto the control sequence (single shooting, adjoint
gradients).  Box and rate constraints form per-component polyhedral chains and
are handled exactly through Euclidean projection (Dykstra with a red-black slab
ordering).  The steering-angle bound is a smooth state constraint handled by an
augmented Lagrangian outer loop; it is inactive in typical scenarios and then
costs nothing.  The inner loop interleaves spectral projected-gradient steps
(globalization, active-face discovery) with Gauss-Newton steps restricted to
the currently active face (fast tail convergence).

Solves are deterministic: identical inputs produce bitwise-identical plans.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _kernels
from . import costs as costs_mod
from .costs import CollisionPenaltyParams, CostWeights
from .dynamics import (
    N_STATES_PER_AGENT,
    PHI_SINGULARITY_GUARD,
    AgentSystem,
    ControlLimits,
    SteeringSingularityError,
    step_nominal,
)

DEFAULT_PHI_MAX = 0.6

# set STOCPLAN_TRACE=1 to print per-iteration solver progress
_TRACE = bool(os.environ.get("STOCPLAN_TRACE"))


@dataclass(frozen=True)
class SolverSettings:
    """Iteration limits and tolerances of the nominal-plan solver.

    Convergence requires the projected-gradient residual to fall below
    ``max(tol_stationarity, floor)`` where the floor, a few multiples of
    ``sqrt(eps * objective scale)``, is the smallest residual whose descent is
    measurable in double precision.
    """

    max_iters: int = 200
    tol_stationarity: float = 1e-6
    spg_steps_per_round: int = 4
    armijo_c: float = 1e-4
    armijo_max_backtracks: int = 30
    nonmonotone_memory: int = 8
    bb_step_min: float = 1e-8
    bb_step_max: float = 1e8
    newton_damping: float = 1e-9
    al_rho0: float = 100.0
    al_growth: float = 10.0
    al_max_outer: int = 8
    al_feas_tol: float = 1e-6
    dykstra_tol: float = 1e-13
    dykstra_max_sweeps: int = 400

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        for name in ("tol_stationarity", "al_feas_tol", "dykstra_tol"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class OCPProblem:
    """One deterministic optimal-control problem instance."""

    x0: np.ndarray
    horizon: int
    weights: CostWeights
    limits: ControlLimits
    system: AgentSystem
    u_init: np.ndarray | None = None
    collision: CollisionPenaltyParams | None = None
    phi_max: float | None = DEFAULT_PHI_MAX

    def __post_init__(self) -> None:
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.system.n_x,):
            raise ValueError(f"x0 must have shape ({self.system.n_x},)")
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        object.__setattr__(self, "x0", x0)
        phi0 = x0.reshape(-1, N_STATES_PER_AGENT)[:, 3]
        if np.any(np.abs(phi0) >= PHI_SINGULARITY_GUARD):
            raise SteeringSingularityError(
                "initial steering angle at the tan() singularity guard")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.limits.n_u != self.system.n_u:
            raise ValueError("limits dimension must match the stacked control")
        u_init = (np.zeros(self.system.n_u) if self.u_init is None
                  else np.asarray(self.u_init, dtype=float))
        if u_init.shape != (self.system.n_u,):
            raise ValueError(f"u_init must have shape ({self.system.n_u},)")
        if np.any(u_init < self.limits.u_min - 1e-12) or np.any(u_init > self.limits.u_max + 1e-12):
            raise ValueError("u_init must lie within the control box")
        object.__setattr__(self, "u_init", u_init)
        if self.phi_max is not None and not self.phi_max > 0.0:
            raise ValueError("phi_max must be positive when set")


@dataclass(frozen=True)
class NominalPlan:
    """Open-loop plan: control sequence, noise-free states, and cost breakdown.

    stage_costs[t] includes the collision penalty when present, so running-cost
    prefixes are directly comparable with executed-cost accumulation.
    """

    controls: np.ndarray          # (H, n_u)
    states: np.ndarray            # (H+1, n_x)
    stage_costs: np.ndarray       # (H,)
    cost: float                   # trajectory_cost(states, controls)
    converged: bool
    iterations: int
    stationarity: float
    phi_violation: float = 0.0
    guess_projected: bool = False

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


def clamp_control(u: np.ndarray, u_prev: np.ndarray, limits: ControlLimits) -> np.ndarray:
    """Clip to the control box, then clip the step from u_prev to +-du_max.

    This is the single constraint-enforcement primitive shared by the solver's
    final feasibility pass and the online controllers, so feasible plans are
    reproduced bitwise during execution.
    """
    u = np.clip(np.asarray(u, dtype=float), limits.u_min, limits.u_max)
    return np.clip(u, u_prev - limits.du_max, u_prev + limits.du_max)


def clamp_control_sequence(seq: np.ndarray, limits: ControlLimits,
                           u_init: np.ndarray) -> np.ndarray:
    """Forward pass of clamp_control along a control sequence."""
    out = np.empty_like(seq)
    prev = u_init
    for t in range(seq.shape[0]):
        out[t] = clamp_control(seq[t], prev, limits)
        prev = out[t]
    return out


def feasibility_violation(seq: np.ndarray, limits: ControlLimits,
                          u_init: np.ndarray) -> float:
    """Largest box/rate violation of a control sequence (0 when feasible)."""
    box = max(float(np.max(limits.u_min - seq, initial=0.0)),
              float(np.max(seq - limits.u_max, initial=0.0)))
    prev = np.vstack([u_init, seq[:-1]])
    rate = float(np.max(np.abs(seq - prev) - limits.du_max, initial=0.0))
    return max(box, rate, 0.0)


def project_box_rate(seq: np.ndarray, limits: ControlLimits, u_init: np.ndarray,
                     tol: float = 1e-13, max_sweeps: int = 400) -> np.ndarray:
    """Euclidean projection onto the box + rate-chain polyhedron.

    Dykstra's algorithm over the elementwise interval set (box, tightened at
    t=0 by the u_init rate window) and the odd/even rate-slab families, whose
    members touch disjoint coordinate pairs and project in closed form.
    """
    z = np.array(seq, dtype=float)
    if feasibility_violation(z, limits, u_init) <= 0.0:
        return z
    h = z.shape[0]
    lo = np.tile(limits.u_min, (h, 1))
    hi = np.tile(limits.u_max, (h, 1))
    lo[0] = np.maximum(lo[0], u_init - limits.du_max)
    hi[0] = np.minimum(hi[0], u_init + limits.du_max)
    return _kernels.dykstra_box_rate(z, lo, hi, limits.du_max.astype(float),
                                     tol, max_sweeps)


def _phi_reachable_bounds(problem: OCPProblem) -> tuple[np.ndarray, np.ndarray]:
    """Per-step steering-angle bounds (lo, up), each (H, m).

    The nominal bound is +-phi_max.  When the initial steering angle already
    violates it (replanning from a noise-perturbed state), the bound is relaxed
    to the tightest envelope reachable under the rate-limited steering input,
    which keeps the state constraint feasible by construction.
    """
    h, m = problem.horizon, problem.system.n_agents
    phi_max = float(problem.phi_max)
    up = np.full((h, m), phi_max)
    lo = np.full((h, m), -phi_max)
    dt = problem.system.dt
    slack = 1e-9
    for j in range(m):
        phi0 = float(problem.x0[4 * j + 3])
        om_lo = float(problem.limits.u_min[2 * j + 1])
        om_hi = float(problem.limits.u_max[2 * j + 1])
        d_om = float(problem.limits.du_max[2 * j + 1])
        om_init = float(problem.u_init[2 * j + 1])
        if phi0 > phi_max:
            env, om = phi0, om_init
            for t in range(h):
                om = max(om_lo, om - d_om)
                env = env + dt * om
                up[t, j] = max(phi_max, env) + slack
        elif phi0 < -phi_max:
            env, om = phi0, om_init
            for t in range(h):
                om = min(om_hi, om + d_om)
                env = env + dt * om
                lo[t, j] = min(-phi_max, env) - slack
    return lo, up


class _PhiPenalty:
    """Augmented-Lagrangian state of the steering-angle bounds lo_t <= phi_t <= up_t."""

    def __init__(self, bound_lo: np.ndarray, bound_up: np.ndarray, rho: float):
        self.bound_lo = bound_lo
        self.bound_up = bound_up
        self.rho = rho
        # multipliers for states x_1 .. x_H (x_0 is fixed), upper/lower bound
        self.mu_up = np.zeros_like(bound_up)
        self.mu_lo = np.zeros_like(bound_lo)

    def value_and_grad(self, phis: np.ndarray) -> tuple[float, np.ndarray]:
        """Penalty value and d/dphi for the phi trajectory of states 1..H, shape (H, m)."""
        rho = self.rho
        up = np.maximum(0.0, self.mu_up / rho + (phis - self.bound_up))
        lo = np.maximum(0.0, self.mu_lo / rho + (self.bound_lo - phis))
        value = 0.5 * rho * float(np.sum(up ** 2 - (self.mu_up / rho) ** 2)
                                  + np.sum(lo ** 2 - (self.mu_lo / rho) ** 2))
        grad = rho * (up - lo)
        return value, grad

    def curvature(self, phis: np.ndarray) -> np.ndarray:
        """Diagonal Hessian contribution rho * 1{active}, shape (H, m)."""
        active_up = (self.mu_up / self.rho + (phis - self.bound_up)) > 0.0
        active_lo = (self.mu_lo / self.rho + (self.bound_lo - phis)) > 0.0
        return self.rho * (active_up.astype(float) + active_lo.astype(float))

    def update_multipliers(self, phis: np.ndarray) -> None:
        self.mu_up = np.maximum(0.0, self.mu_up + self.rho * (phis - self.bound_up))
        self.mu_lo = np.maximum(0.0, self.mu_lo + self.rho * (self.bound_lo - phis))

    def violation(self, phis: np.ndarray) -> float:
        over = np.maximum(phis - self.bound_up, 0.0)
        under = np.maximum(self.bound_lo - phis, 0.0)
        return float(max(np.max(over, initial=0.0), np.max(under, initial=0.0)))


class _Work:
    """Cached problem data plus compiled rollout/gradient kernels for one solve."""

    def __init__(self, problem: OCPProblem):
        self.problem = problem
        self.system = problem.system
        self.h = problem.horizon
        self.m = self.system.n_agents
        self.n_x = self.system.n_x
        self.n_u = self.system.n_u
        self.dt = float(self.system.dt)
        self.wheelbase = np.ascontiguousarray(self.system.wheelbases, dtype=float)
        self.x0 = np.ascontiguousarray(problem.x0, dtype=float)
        self.goal = np.ascontiguousarray(problem.weights.x_goal, dtype=float)
        self.w_x = np.ascontiguousarray(problem.weights.w_x, dtype=float)
        self.w_u = np.ascontiguousarray(problem.weights.w_u, dtype=float)
        self.w_xf = np.ascontiguousarray(problem.weights.w_xf, dtype=float)
        self.collision = problem.collision if self.m >= 2 else None
        self.coll_scale = float(self.collision.scale) if self.collision else 0.0
        self.coll_r2 = float(self.collision.r_thresh ** 2) if self.collision else 0.0
        self._pen_zeros = np.zeros((self.h, self.m))

    # -- forward rollout --------------------------------------------------

    def rollout(self, controls: np.ndarray) -> tuple[np.ndarray, tuple]:
        """States (H+1, n_x) plus per-step trig caches for the adjoint pass."""
        states, cs, sn, tn, s2 = _kernels.rollout(
            np.ascontiguousarray(controls), self.x0, self.dt, self.wheelbase, self.m)
        return states, (cs, sn, tn, s2)

    # -- objective values --------------------------------------------------

    def plain_cost(self, states: np.ndarray, controls: np.ndarray) -> float:
        """Reference-path trajectory cost (defines the reported plan cost)."""
        return costs_mod.trajectory_cost(states, controls, self.problem.weights,
                                         self.collision, self.m)

    def al_cost(self, states: np.ndarray, controls: np.ndarray,
                phi_pen: _PhiPenalty | None) -> tuple[float, float]:
        """(augmented, plain) objective used inside the solver iterations."""
        if phi_pen is None:
            j_aug, j_plain = _kernels.objective(
                states, controls, self.goal, self.w_x, self.w_u, self.w_xf,
                self.m, self.coll_scale, self.coll_r2,
                self._pen_zeros, self._pen_zeros, self._pen_zeros,
                self._pen_zeros, 1.0, False)
        else:
            j_aug, j_plain = _kernels.objective(
                states, controls, self.goal, self.w_x, self.w_u, self.w_xf,
                self.m, self.coll_scale, self.coll_r2,
                phi_pen.bound_lo, phi_pen.bound_up, phi_pen.mu_lo,
                phi_pen.mu_up, phi_pen.rho, True)
        return float(j_aug), float(j_plain)

    # -- adjoint gradient ---------------------------------------------------

    def gradient(self, states: np.ndarray, controls: np.ndarray, cache: tuple,
                 phi_pen: _PhiPenalty | None) -> np.ndarray:
        """Gradient of the (augmented) objective with respect to the controls."""
        cs, sn, tn, s2 = cache
        if phi_pen is not None:
            phis = states[1:].reshape(self.h, self.m, N_STATES_PER_AGENT)[:, :, 3]
            _, pen_grad = phi_pen.value_and_grad(phis)
            use_pen = True
        else:
            pen_grad = self._pen_zeros
            use_pen = False
        return _kernels.adjoint_gradient(
            states, np.ascontiguousarray(controls), cs, sn, tn, s2, self.goal,
            self.w_x, self.w_u, self.w_xf, self.dt, self.wheelbase, self.m,
            self.coll_scale, self.coll_r2, pen_grad, use_pen)

    # -- Gauss-Newton model --------------------------------------------------

    def gauss_newton_hessian(self, states: np.ndarray, controls: np.ndarray,
                             cache: tuple, phi_pen: _PhiPenalty | None) -> np.ndarray:
        """GN Hessian of the augmented objective over the flattened controls."""
        h, m, n_x, n_u = self.h, self.m, self.n_x, self.n_u
        cs, sn, tn, s2 = cache
        sens = _kernels.control_sensitivities(
            np.ascontiguousarray(controls), cs, sn, tn, s2, self.dt,
            self.wheelbase, self.m)
        mats = np.broadcast_to(2.0 * self.w_x, (h + 1, n_x, n_x)).copy()
        mats[h] = 2.0 * self.w_xf
        if self.collision is not None:
            for t in range(h):
                mats[t] += costs_mod.collision_penalty_hessian(
                    states[t], self.collision, m)
        if phi_pen is not None:
            phis = states[1:].reshape(h, m, N_STATES_PER_AGENT)[:, :, 3]
            pen_curv = phi_pen.curvature(phis)
            for j in range(m):
                mats[1:, 4 * j + 3, 4 * j + 3] += pen_curv[:, j]
        weighted = mats @ sens
        dim = h * n_u
        flat_s = sens.reshape((h + 1) * n_x, dim)
        flat_w = weighted.reshape((h + 1) * n_x, dim)
        hess = flat_s.T @ flat_w
        for t in range(h):
            sl = slice(t * n_u, (t + 1) * n_u)
            hess[sl, sl] += 2.0 * self.w_u
        return hess


def _working_set_groups(seq: np.ndarray, grad: np.ndarray | None,
                        limits: ControlLimits, u_init: np.ndarray,
                        tol: float = 1e-8) -> np.ndarray:
    """Working set for a Newton step: flat group ids, -1 for frozen coordinates.

    Coordinates tied by an in-set rate link move as one group; groups pinned by
    an in-set box bound (or the u_init rate window at t = 0) are frozen.  When
    ``grad`` is given, an active constraint joins the set only if its
    multiplier estimate says the objective pushes against it (release rule, for
    projected Newton steps); with ``grad=None`` every geometrically active
    constraint joins (conservative face steps).
    """
    h, n_u = seq.shape
    group = np.zeros((h, n_u), dtype=int)
    frozen = set()
    next_id = 0
    for k in range(n_u):
        lo0 = max(limits.u_min[k], u_init[k] - limits.du_max[k])
        hi0 = min(limits.u_max[k], u_init[k] + limits.du_max[k])
        for t in range(h):
            if t == 0:
                group[t, k] = next_id
                next_id += 1
            else:
                diff = seq[t, k] - seq[t - 1, k]
                up_active = limits.du_max[k] - diff <= tol
                dn_active = diff + limits.du_max[k] <= tol
                if grad is not None:
                    gdiff = grad[t, k] - grad[t - 1, k]
                    in_set = (up_active and gdiff < 0.0) or (dn_active and gdiff > 0.0)
                else:
                    in_set = up_active or dn_active
                if in_set:
                    group[t, k] = group[t - 1, k]
                else:
                    group[t, k] = next_id
                    next_id += 1
            lo = lo0 if t == 0 else limits.u_min[k]
            hi = hi0 if t == 0 else limits.u_max[k]
            hi_active = hi - seq[t, k] <= tol
            lo_active = seq[t, k] - lo <= tol
            if grad is not None:
                pin = (hi_active and grad[t, k] < 0.0) or (lo_active and grad[t, k] > 0.0)
            else:
                pin = hi_active or lo_active
            if pin:
                frozen.add(group[t, k])
    flat = group.reshape(-1).copy()
    for i, g in enumerate(flat):
        if g in frozen:
            flat[i] = -1
    return flat


def _max_feasible_step(seq: np.ndarray, direction: np.ndarray,
                       limits: ControlLimits, u_init: np.ndarray) -> float:
    """Largest alpha <= 1 keeping seq + alpha * direction feasible (ratio test)."""
    h, n_u = seq.shape
    alpha = 1.0
    d = direction
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(d > 1e-300, (np.tile(limits.u_max, (h, 1)) - seq) / d, np.inf)
        dn = np.where(d < -1e-300, (np.tile(limits.u_min, (h, 1)) - seq) / d, np.inf)
        alpha = min(alpha, float(np.min(up)), float(np.min(dn)))
        prev = np.vstack([u_init, seq[:-1]])
        dprev = np.vstack([np.zeros(n_u), d[:-1]])
        dd = d - dprev
        slack_up = limits.du_max - (seq - prev)
        slack_dn = limits.du_max + (seq - prev)
        r_up = np.where(dd > 1e-300, slack_up / dd, np.inf)
        r_dn = np.where(dd < -1e-300, slack_dn / (-dd), np.inf)
        alpha = min(alpha, float(np.min(r_up)), float(np.min(r_dn)))
    return max(alpha, 0.0)


def solve_ocp(problem: OCPProblem, guess: np.ndarray | None = None,
              settings: SolverSettings | None = None) -> NominalPlan:
    """Solve the deterministic OCP; returns a feasible locally-optimal plan.

    A non-converged solve (iteration budget exhausted) still returns the best
    feasible iterate, flagged through ``converged=False``.  An infeasible warm
    start is projected onto the constraint set and recorded via
    ``guess_projected``.
    """
    settings = settings if settings is not None else SolverSettings()
    work = _Work(problem)
    h, n_u = problem.horizon, problem.system.n_u
    limits, u_init = problem.limits, problem.u_init

    guess_projected = False
    if guess is None:
        u = np.zeros((h, n_u))
    else:
        u = np.array(guess, dtype=float)
        if u.shape != (h, n_u):
            raise ValueError(f"guess must have shape ({h}, {n_u}), got {u.shape}")
        if feasibility_violation(u, limits, u_init) > 1e-12:
            guess_projected = True
    u = project_box_rate(u, limits, u_init, settings.dykstra_tol,
                         settings.dykstra_max_sweeps)

    if problem.phi_max is not None:
        bound_lo, bound_up = _phi_reachable_bounds(problem)
        phi_pen = _PhiPenalty(bound_lo, bound_up, settings.al_rho0)
    else:
        phi_pen = None

    def project(seq: np.ndarray) -> np.ndarray:
        return project_box_rate(seq, limits, u_init, settings.dykstra_tol,
                                settings.dykstra_max_sweeps)

    total_iters = 0
    converged = False
    stationarity = np.inf

    states, cache = work.rollout(u)
    j_al, _ = work.al_cost(states, u, phi_pen)
    grad = work.gradient(states, u, cache, phi_pen)

    def scaled_stationarity(u_cur: np.ndarray, grad_cur: np.ndarray) -> float:
        # residual ||u - P(u - c g)|| / c bounds the projected gradient while
        # keeping the projected point close to u (cheap, well-conditioned)
        c = 1.0 / (1.0 + float(np.max(np.abs(grad_cur))))
        residual = u_cur - project(u_cur - c * grad_cur)
        return float(np.max(np.abs(residual))) / c

    # trial states beyond this steering magnitude leave the model's valid
    # domain (tan wraps); the line searches treat such trials as infeasible
    phi_hard = PHI_SINGULARITY_GUARD - 0.02

    def model_valid(states_try: np.ndarray) -> bool:
        return float(np.max(np.abs(states_try[:, 3::4]))) < phi_hard

    # cap the pre-projection displacement of spectral steps so Dykstra always
    # projects points within a few box widths
    disp_cap = 20.0 * float(np.max(limits.u_max - limits.u_min))

    outer_rounds = settings.al_max_outer if phi_pen is not None else 1
    for outer in range(outer_rounds):
        # ------- inner minimization over the box/rate polyhedron -------
        recent = [j_al]
        bb_step = 1.0 / max(float(np.max(np.abs(grad))), 1e-12)
        converged = False
        stall_rounds = 0
        while total_iters < settings.max_iters:
            stationarity = scaled_stationarity(u, grad)
            tol_eff = max(settings.tol_stationarity,
                          4.0 * float(np.sqrt(np.spacing(1.0 + abs(j_al)))))
            if _TRACE:
                print(f"[trajopt] outer={outer} it={total_iters} J={j_al:.10f} stat={stationarity:.3e}")
            if stationarity <= tol_eff:
                converged = True
                break
            j_round_start = j_al

            # Gauss-Newton phase: a projected step on the released working set,
            # falling back to a conservative step along the active face
            accepted_newton = False
            hess = None
            g_flat = grad.reshape(-1)

            def newton_direction(groups: np.ndarray) -> np.ndarray | None:
                nonlocal hess
                n_groups = int(groups.max()) + 1 if groups.max() >= 0 else 0
                if n_groups == 0:
                    return None
                if hess is None:
                    hess = work.gauss_newton_hessian(states, u, cache, phi_pen)
                sel = np.zeros((groups.shape[0], n_groups))
                valid = groups >= 0
                sel[np.nonzero(valid)[0], groups[valid]] = 1.0
                h_red = sel.T @ hess @ sel
                g_red = sel.T @ g_flat
                tau = settings.newton_damping * (
                    1.0 + float(np.trace(h_red)) / max(n_groups, 1))
                for _ in range(6):
                    try:
                        cho = scipy.linalg.cho_factor(
                            h_red + tau * np.eye(n_groups), lower=True)
                        return (sel @ scipy.linalg.cho_solve(cho, -g_red)).reshape(h, n_u)
                    except scipy.linalg.LinAlgError:
                        tau = max(tau * 100.0, 1e-10)
                return None

            j_ref = j_al  # Newton steps are monotone; only SPG uses the memory
            direction = newton_direction(
                _working_set_groups(u, grad, limits, u_init))
            if direction is not None:
                alpha = 1.0
                for _ in range(settings.armijo_max_backtracks):
                    u_try = project(u + alpha * direction)
                    step_vec = (u_try - u).reshape(-1)
                    slope = float(g_flat @ step_vec)
                    if slope >= 0.0 or float(np.max(np.abs(step_vec))) <= 1e-15:
                        break
                    states_try, cache_try = work.rollout(u_try)
                    if not model_valid(states_try):
                        alpha *= 0.5
                        continue
                    j_try, _ = work.al_cost(states_try, u_try, phi_pen)
                    if j_try <= j_ref + settings.armijo_c * slope:
                        u, states, cache, j_al = u_try, states_try, cache_try, j_try
                        grad = work.gradient(states, u, cache, phi_pen)
                        accepted_newton = True
                        break
                    alpha *= 0.5
            if not accepted_newton:
                direction = newton_direction(
                    _working_set_groups(u, None, limits, u_init))
                if direction is not None:
                    slope_full = float(g_flat @ direction.reshape(-1))
                    if slope_full < 0.0:
                        alpha = min(1.0, _max_feasible_step(u, direction, limits, u_init))
                        while alpha > 1e-14:
                            u_try = u + alpha * direction
                            states_try, cache_try = work.rollout(u_try)
                            if not model_valid(states_try):
                                alpha *= 0.5
                                continue
                            j_try, _ = work.al_cost(states_try, u_try, phi_pen)
                            if j_try <= j_ref + settings.armijo_c * alpha * slope_full:
                                u, states, cache, j_al = u_try, states_try, cache_try, j_try
                                grad = work.gradient(states, u, cache, phi_pen)
                                accepted_newton = True
                                break
                            alpha *= 0.5
            if accepted_newton:
                total_iters += 1
                recent.append(j_al)
                recent = recent[-settings.nonmonotone_memory:]
                if j_round_start - j_al <= 8.0 * np.spacing(1.0 + abs(j_al)):
                    stall_rounds += 1
                    if stall_rounds >= 3:
                        break
                else:
                    stall_rounds = 0
                continue

            # spectral projected-gradient burst
            stalled = False
            for _ in range(settings.spg_steps_per_round):
                if total_iters >= settings.max_iters:
                    break
                step = float(np.clip(bb_step, settings.bb_step_min, settings.bb_step_max))
                gmax = max(float(np.max(np.abs(grad))), 1e-12)
                step = min(step, disp_cap / gmax)
                u_cand = project(u - step * grad)
                delta = u_cand - u
                slope = float(grad.reshape(-1) @ delta.reshape(-1))
                if float(np.max(np.abs(delta))) <= 1e-15 or slope >= 0.0:
                    stalled = True
                    break
                j_ref = max(recent)
                theta = 1.0
                accepted = False
                for _ in range(settings.armijo_max_backtracks):
                    u_try = u + theta * delta
                    states_try, cache_try = work.rollout(u_try)
                    if model_valid(states_try):
                        j_try, _ = work.al_cost(states_try, u_try, phi_pen)
                        if j_try <= j_ref + settings.armijo_c * theta * slope:
                            accepted = True
                            break
                    theta *= 0.5
                if not accepted:
                    stalled = True
                    break
                grad_new = work.gradient(states_try, u_try, cache_try, phi_pen)
                s_vec = (u_try - u).reshape(-1)
                y_vec = (grad_new - grad).reshape(-1)
                sty = float(s_vec @ y_vec)
                bb_step = float(s_vec @ s_vec) / sty if sty > 1e-300 else settings.bb_step_max
                u, states, cache, grad, j_al = u_try, states_try, cache_try, grad_new, j_try
                total_iters += 1
                recent.append(j_al)
                recent = recent[-settings.nonmonotone_memory:]
            if stalled:
                stationarity = scaled_stationarity(u, grad)
                tol_eff = max(settings.tol_stationarity,
                              4.0 * float(np.sqrt(np.spacing(1.0 + abs(j_al)))))
                converged = stationarity <= tol_eff
                break
            if j_round_start - j_al <= 8.0 * np.spacing(1.0 + abs(j_al)):
                stall_rounds += 1
                if stall_rounds >= 3:
                    break
            else:
                stall_rounds = 0

        # ------- augmented-Lagrangian bookkeeping for the phi bound -------
        if phi_pen is None:
            break
        phis = states[1:].reshape(h, work.m, N_STATES_PER_AGENT)[:, :, 3]
        if phi_pen.violation(phis) <= settings.al_feas_tol and converged:
            break
        if outer < outer_rounds - 1:
            phi_pen.update_multipliers(phis)
            phi_pen.rho *= settings.al_growth
            j_al, _ = work.al_cost(states, u, phi_pen)
            grad = work.gradient(states, u, cache, phi_pen)

    # exact feasibility pass with the controllers' clamp arithmetic, then rebuild
    u = clamp_control_sequence(u, limits, u_init)
    states = rollout_nominal(problem.x0, u, problem.system)
    stage = np.empty(h)
    for t in range(h):
        c = costs_mod.stage_cost(states[t], u[t], problem.weights)
        if work.collision is not None:
            c += costs_mod.collision_penalty(states[t], work.collision, work.m)
        stage[t] = c
    total = work.plain_cost(states, u)
    if phi_pen is not None:
        phis = states[1:].reshape(h, work.m, N_STATES_PER_AGENT)[:, :, 3]
        phi_violation = phi_pen.violation(phis)
        converged = converged and phi_violation <= settings.al_feas_tol
    else:
        phi_violation = 0.0
    return NominalPlan(
        controls=u, states=states, stage_costs=stage, cost=total,
        converged=converged, iterations=total_iters, stationarity=stationarity,
        phi_violation=phi_violation, guess_projected=guess_projected,
    )


def rollout_nominal(x0: np.ndarray, controls: np.ndarray,
                    system: AgentSystem) -> np.ndarray:
    """Noise-free forward simulation; returns len(controls)+1 states."""
    controls = np.asarray(controls, dtype=float)
    states = np.empty((controls.shape[0] + 1, system.n_x))
    states[0] = np.asarray(x0, dtype=float)
    for t in range(controls.shape[0]):
        states[t + 1] = step_nominal(states[t], controls[t], system)
    return states


def nominal_cost_prefix(plan: NominalPlan, t: int) -> float:
    """Running nominal cost through step t (stage terms only; terminal at t = H).

    Sequential accumulation mirrors the controllers' running-cost bookkeeping so
    noise-free comparisons are bitwise exact.
    """
    if t < 0 or t > plan.horizon:
        raise IndexError(f"prefix step {t} outside [0, {plan.horizon}]")
    if t == plan.horizon:
        return plan.cost
    total = 0.0
    for s in range(t + 1):
        total += float(plan.stage_costs[s])
    return total
